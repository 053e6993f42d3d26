"""Kernel-level layer extraction from hint traces.

Each kernel's hint row is classified by a small LSTM into one of the eight
tokens (seven layer types plus CONT). The first kernel of a layer carries the
layer's token and the remaining ones carry CONT, so greedy decoding is an
argmax per kernel followed by dropping CONT.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from umx.model_zoo import ALPHABET, CONT, LayerType
from umx.umsim import HINTS, Trace

FORMAT_VERSION = "umx-classifier/1"
N_CLASSES = len(ALPHABET)
_TOKEN_INDEX = {tok: i for i, tok in enumerate(ALPHABET)}
_CONT_INDEX = _TOKEN_INDEX[CONT]
FEATURE_CLIP = 8.0

HINT_SETS: dict[str, tuple[str, ...]] = {
    "s1": ("PFLat",),
    "s2": ("MigSize",),
    "s3": ("PFLat", "MigLat", "MigSize"),
    "s4": ("L2read", "L2write"),
    "s5": ("PFLat", "MigLat", "MigSize", "L2read", "L2write"),
}


class HintMismatch(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class EmptyTrace(ValueError):
    pass


class Divergence(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class HintSet:
    id: str
    hints: tuple[str, ...]

    @classmethod
    def get(cls, hs: str | HintSet) -> HintSet:
        if isinstance(hs, HintSet):
            return hs
        if hs not in HINT_SETS:
            raise KeyError(f"unknown hint set {hs!r}; expected one of {sorted(HINT_SETS)}")
        return cls(hs, HINT_SETS[hs])


# ---------------------------------------------------------------------------
# features


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]


def _raw_features(trace: Trace, hs: HintSet) -> np.ndarray:
    cols = []
    for h in hs.hints:
        if h not in HINTS:
            raise HintMismatch(f"hint {h!r} is not a known hint")
        cols.append(HINTS.index(h))
    values = np.asarray(trace.values, dtype=float)
    if values.ndim != 2 or values.shape[1] != len(HINTS):
        raise HintMismatch(f"trace has {values.shape} values, expected (*, {len(HINTS)})")
    x = values[:, cols]
    if not np.isfinite(x).all():
        raise HintMismatch(f"trace {trace.model_name} has non-finite values in {hs.hints}")
    return np.log1p(np.maximum(x, 0.0))


def fit_stats(traces: Sequence[Trace], hs: HintSet) -> NormStats:
    x = np.concatenate([_raw_features(t, hs) for t in traces])
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    # a constant column z-scores to zeros rather than dividing by zero
    const = sd <= 1e-12 * np.maximum(1.0, np.abs(mu))
    sd[const] = 1.0
    mu[const] = x[0, const] if len(x) else 0.0
    return NormStats(tuple(float(v) for v in mu), tuple(float(v) for v in sd))


def featurize(trace: Trace, hs: HintSet | str, stats: NormStats) -> np.ndarray:
    hs = HintSet.get(hs)
    if len(stats.mean) != len(hs.hints):
        raise HintMismatch(f"stats cover {len(stats.mean)} hints, hint set {hs.id} has {len(hs.hints)}")
    x = _raw_features(trace, hs)
    z = (x - np.asarray(stats.mean)) / np.asarray(stats.std)
    return np.clip(z, -FEATURE_CLIP, FEATURE_CLIP)


def encode_labels(labels: Sequence[str]) -> np.ndarray:
    return np.array([_TOKEN_INDEX[str(lab)] for lab in labels], dtype=np.int64)


# ---------------------------------------------------------------------------
# LSTM


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def init_params(n_in: int, hidden: int, bidirectional: bool, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    k = 1.0 / math.sqrt(hidden)
    p: dict[str, np.ndarray] = {}
    for d in _directions(bidirectional):
        p[f"Wx_{d}"] = rng.uniform(-k, k, (n_in, 4 * hidden))
        p[f"Wh_{d}"] = rng.uniform(-k, k, (hidden, 4 * hidden))
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = 1.0  # forget gate starts open
        p[f"b_{d}"] = b
    n_dir = 2 if bidirectional else 1
    ko = 1.0 / math.sqrt(n_dir * hidden)
    p["Wo"] = rng.uniform(-ko, ko, (n_dir * hidden, N_CLASSES))
    p["bo"] = np.zeros(N_CLASSES)
    return p


def prior_bias(label_ids: Sequence[np.ndarray]) -> np.ndarray:
    """Output bias set to the smoothed log class frequencies of the training labels.

    Starting from the label prior skips the early phase where the network only
    learns class frequencies, which otherwise overshoots and bumps the loss.
    """
    counts = np.bincount(np.concatenate(label_ids), minlength=N_CLASSES).astype(float)
    return np.log(counts / counts.sum() + 1e-3)


def _directions(bidirectional: bool) -> tuple[str, ...]:
    return ("fwd", "bwd") if bidirectional else ("fwd",)


def _lstm_forward(x, mask, Wx, Wh, b, reverse):
    """x (B,T,D), mask (B,T). Padded steps carry the state through unchanged."""
    B, T, _ = x.shape
    H = Wh.shape[0]
    xz = x @ Wx + b
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    hs = np.zeros((B, T, H))
    cache = []
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        z = xz[:, t] + h @ Wh
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H : 2 * H])
        g = np.tanh(z[:, 2 * H : 3 * H])
        o = _sigmoid(z[:, 3 * H :])
        cn = f * c + i * g
        tc = np.tanh(cn)
        hn = o * tc
        m = mask[:, t : t + 1]
        cache.append((t, h, c, i, f, g, o, tc, m))
        h = m * hn + (1 - m) * h
        c = m * cn + (1 - m) * c
        hs[:, t] = h
    return hs, cache


def _lstm_backward(dhs, x, Wx, Wh, cache):
    B, T, D = x.shape
    H = Wh.shape[0]
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros(4 * H)
    dz_all = np.zeros((B, T, 4 * H))
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    for t, h_prev, c_prev, i, f, g, o, tc, m in reversed(cache):
        dh = dh + dhs[:, t]
        dhn = m * dh
        dcn = m * dc + dhn * o * (1 - tc * tc)
        do = dhn * tc
        di = dcn * g
        dg = dcn * i
        df = dcn * c_prev
        dz = np.concatenate(
            [di * i * (1 - i), df * f * (1 - f), dg * (1 - g * g), do * o * (1 - o)], axis=1
        )
        dz_all[:, t] = dz
        dWh += h_prev.T @ dz
        dh = (1 - m) * dh + dz @ Wh.T
        dc = (1 - m) * dc + dcn * f
    flat = dz_all.reshape(B * T, 4 * H)
    dWx += x.reshape(B * T, D).T @ flat
    db += flat.sum(axis=0)
    return dWx, dWh, db


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _net_forward(params, x, mask, bidirectional):
    outs = []
    caches = []
    for d in _directions(bidirectional):
        hs, cache = _lstm_forward(x, mask, params[f"Wx_{d}"], params[f"Wh_{d}"], params[f"b_{d}"], d == "bwd")
        outs.append(hs)
        caches.append(cache)
    hcat = np.concatenate(outs, axis=-1)
    logits = hcat @ params["Wo"] + params["bo"]
    return logits, hcat, caches


def loss_and_grads(
    params: dict[str, np.ndarray], x: np.ndarray, y: np.ndarray, mask: np.ndarray, bidirectional: bool
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean per-kernel cross-entropy over unmasked kernels and its gradient."""
    logits, hcat, caches = _net_forward(params, x, mask, bidirectional)
    probs = _softmax(logits)
    n = float(mask.sum())
    yi = np.where(mask > 0, y, 0)
    picked = np.take_along_axis(probs, yi[..., None], axis=-1)[..., 0]
    loss = float(-(np.log(np.maximum(picked, 1e-300)) * mask).sum() / n)

    dlogits = probs.copy()
    np.put_along_axis(dlogits, yi[..., None], np.take_along_axis(dlogits, yi[..., None], -1) - 1.0, axis=-1)
    dlogits *= mask[..., None] / n
    H2 = hcat.shape[-1]
    grads = {
        "Wo": hcat.reshape(-1, H2).T @ dlogits.reshape(-1, N_CLASSES),
        "bo": dlogits.reshape(-1, N_CLASSES).sum(axis=0),
    }
    dh = dlogits @ params["Wo"].T
    H = params["Wh_fwd"].shape[0]
    for k, d in enumerate(_directions(bidirectional)):
        dWx, dWh, db = _lstm_backward(dh[..., k * H : (k + 1) * H], x, params[f"Wx_{d}"], params[f"Wh_{d}"], caches[k])
        grads[f"Wx_{d}"] = dWx
        grads[f"Wh_{d}"] = dWh
        grads[f"b_{d}"] = db
    return loss, grads


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    lr: float = 0.003
    hidden: int = 64
    seed: int = 0
    batch_size: int = 16
    optimizer: str = "adam"
    momentum: float = 0.9
    clip_norm: float = 5.0
    bidirectional: bool = True

    def check(self) -> None:
        if self.epochs < 0 or self.hidden < 1 or self.batch_size < 1:
            raise ValueError(f"invalid training config {self}")
        if not self.lr > 0 or not self.clip_norm > 0:
            raise ValueError("lr and clip_norm must be positive")
        if self.optimizer not in ("adam", "momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> TrainConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training options {sorted(unknown)}")
        return cls(**d)


@dataclass
class SequenceClassifier:
    hint_set: HintSet
    stats: NormStats
    config: TrainConfig
    params: dict[str, np.ndarray]
    history: list[float] = field(default_factory=list)
    heldout_token_accuracy: float | None = None

    @property
    def n_inputs(self) -> int:
        return len(self.hint_set.hints)

    def to_dict(self) -> dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "hint_set": self.hint_set.id,
            "hints": list(self.hint_set.hints),
            "alphabet": list(ALPHABET),
            "stats": {"mean": list(self.stats.mean), "std": list(self.stats.std)},
            "config": asdict(self.config),
            "history": list(self.history),
            "heldout_token_accuracy": self.heldout_token_accuracy,
            "params": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SequenceClassifier:
        if d.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(f"checkpoint version {d.get('format_version')!r} != {FORMAT_VERSION!r}")
        if list(d["alphabet"]) != list(ALPHABET):
            raise CheckpointError("checkpoint alphabet differs from this build")
        hs = HintSet(d["hint_set"], tuple(d["hints"]))
        params = {k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in d["params"].items()}
        for k, v in params.items():
            if not np.isfinite(v).all():
                raise CheckpointError(f"non-finite weights in {k}")
        if params["Wo"].shape[1] != N_CLASSES:
            raise CheckpointError("output layer width must equal the alphabet size")
        stats = NormStats(tuple(d["stats"]["mean"]), tuple(d["stats"]["std"]))
        return cls(hs, stats, TrainConfig.from_dict(d["config"]), params, list(d.get("history", [])),
                   d.get("heldout_token_accuracy"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> SequenceClassifier:
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise CheckpointError(f"{path}: {e}") from None
        return cls.from_dict(d)


def _pad_batch(xs: list[np.ndarray], ys: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    T = max(len(x) for x in xs)
    D = xs[0].shape[1]
    x = np.zeros((len(xs), T, D))
    y = np.zeros((len(xs), T), dtype=np.int64)
    m = np.zeros((len(xs), T))
    for b, (xi, yi) in enumerate(zip(xs, ys)):
        x[b, : len(xi)] = xi
        y[b, : len(yi)] = yi
        m[b, : len(xi)] = 1.0
    return x, y, m


class _Optimizer:
    def __init__(self, cfg: TrainConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        self.t += 1
        for k in sorted(params):
            g = grads[k]
            if cfg.optimizer == "momentum":
                self.m[k] = cfg.momentum * self.m[k] + g
                params[k] -= cfg.lr * self.m[k]
            else:
                self.m[k] = 0.9 * self.m[k] + 0.1 * g
                self.v[k] = 0.999 * self.v[k] + 0.001 * g * g
                mh = self.m[k] / (1 - 0.9**self.t)
                vh = self.v[k] / (1 - 0.999**self.t)
                params[k] -= cfg.lr * mh / (np.sqrt(vh) + 1e-8)


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def train(
    corpus: Sequence[tuple[Trace, Sequence[str]]],
    hs: HintSet | str,
    hyper: TrainConfig | None = None,
    *,
    validation: Sequence[tuple[Trace, Sequence[str]]] | None = None,
    log=None,
) -> SequenceClassifier:
    """Fit a classifier by per-kernel cross-entropy; deterministic given the seed."""
    hs = HintSet.get(hs)
    cfg = hyper or TrainConfig()
    cfg.check()
    if not corpus:
        raise ValueError("training corpus is empty")
    for t, labels in corpus:
        if len(t) != len(labels):
            raise ValueError(f"{t.model_name}: {len(labels)} labels for {len(t)} kernels")
        if len(t) == 0:
            raise EmptyTrace(f"{t.model_name}: empty trace in corpus")
    stats = fit_stats([t for t, _ in corpus], hs)
    xs = [featurize(t, hs, stats) for t, _ in corpus]
    ys = [encode_labels(lab) for _, lab in corpus]
    params = init_params(len(hs.hints), cfg.hidden, cfg.bidirectional, cfg.seed)
    params["bo"] = prior_bias(ys)
    opt = _Optimizer(cfg, params)
    rng = np.random.default_rng(cfg.seed + 1)
    history: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(xs))
        total = 0.0
        frames = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x, y, m = _pad_batch([xs[i] for i in idx], [ys[i] for i in idx])
            loss, grads = loss_and_grads(params, x, y, m, cfg.bidirectional)
            if not math.isfinite(loss):
                raise Divergence(f"non-finite loss at epoch {epoch}, batch starting {start}")
            _clip(grads, cfg.clip_norm)
            opt.step(params, grads)
            total += loss * m.sum()
            frames += int(m.sum())
        history.append(total / frames)
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {history[-1]:.4f}")
    clf = SequenceClassifier(hs, stats, cfg, params, history)
    if validation:
        clf.heldout_token_accuracy = token_accuracy(clf, validation)
    return clf


def token_accuracy(clf: SequenceClassifier, corpus: Sequence[tuple[Trace, Sequence[str]]]) -> float:
    hit = 0
    n = 0
    for t, labels in corpus:
        pred = forward(clf, featurize(t, clf.hint_set, clf.stats)).argmax(axis=1)
        hit += int((pred == encode_labels(labels)).sum())
        n += len(labels)
    return hit / n if n else 0.0


# ---------------------------------------------------------------------------
# inference


def forward(clf: SequenceClassifier, fm: np.ndarray) -> np.ndarray:
    """Posterior over the token alphabet for every kernel (rows sum to 1)."""
    fm = np.asarray(fm, dtype=float)
    if fm.ndim != 2 or fm.shape[1] != clf.n_inputs:
        raise ShapeMismatch(f"features {fm.shape} do not match a {clf.n_inputs}-input classifier")
    if len(fm) == 0:
        return np.zeros((0, N_CLASSES))
    logits, _, _ = _net_forward(clf.params, fm[None], np.ones((1, len(fm))), clf.config.bidirectional)
    return _softmax(logits[0])


def decode_indices(post: np.ndarray) -> list[tuple[int, str]]:
    """(kernel position, token) for every non-CONT argmax."""
    best = np.asarray(post).argmax(axis=1)
    return [(p, ALPHABET[k]) for p, k in enumerate(best) if k != _CONT_INDEX]


def decode(post: np.ndarray) -> list[LayerType]:
    return [LayerType(tok) for _, tok in decode_indices(post)]


def one_hot(labels: Sequence[str]) -> np.ndarray:
    out = np.zeros((len(labels), N_CLASSES))
    out[np.arange(len(labels)), encode_labels(labels)] = 1.0
    return out


@dataclass(frozen=True)
class DimEstimate:
    layer: int
    type: LayerType
    kernel_position: int
    filter_bytes_est: float
    io_bytes_est: float


@dataclass(frozen=True)
class ExtractionResult:
    layers: list[LayerType]
    posteriors: np.ndarray
    positions: list[int]
    dim_estimates: list[DimEstimate]


_COMPUTE_KERNELS = ("gemm_kernel", "gemm_tn_kernel")


def estimate_dims(trace: Trace, positions: Sequence[int], layers: Sequence[LayerType]) -> list[DimEstimate]:
    """Filter and input size estimates for each predicted CONV/FC layer.

    A predicted layer spans from its token's kernel up to the next predicted
    token. The compute kernel is the span's GEMM launch when kernel names are
    available, otherwise the span kernel with the largest L2 read volume.
    """
    mig = trace.column("MigSize")
    l2r = trace.column("L2read")
    out = []
    bounds = list(positions) + [len(trace)]
    for j, lt in enumerate(layers):
        if lt not in (LayerType.CONV, LayerType.FC):
            continue
        lo, hi = bounds[j], bounds[j + 1]
        span = range(lo, hi)
        compute = [p for p in span if trace.kernel_names[p] in _COMPUTE_KERNELS]
        ck = compute[0] if compute else max(span, key=lambda p: l2r[p])
        out.append(DimEstimate(j, lt, lo, float(mig[lo:hi].sum()), float(l2r[ck])))
    return out


def extract(clf: SequenceClassifier, trace: Trace, hs: HintSet | str | None = None) -> ExtractionResult:
    if hs is not None and HintSet.get(hs).hints != clf.hint_set.hints:
        raise HintMismatch(f"classifier was trained on {clf.hint_set.id}, not {HintSet.get(hs).id}")
    if len(trace) == 0:
        raise EmptyTrace(f"{trace.model_name}: trace has no kernels")
    post = forward(clf, featurize(trace, clf.hint_set, clf.stats))
    found = decode_indices(post)
    positions = [p for p, _ in found]
    layers = [LayerType(tok) for _, tok in found]
    return ExtractionResult(layers, post, positions, estimate_dims(trace, positions, layers))
