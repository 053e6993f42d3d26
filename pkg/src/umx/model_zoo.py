"""DNN architecture descriptions: benchmark catalog, random generator, JSON I/O."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np


class LayerType(str, enum.Enum):
    CONV = "CONV"
    FC = "FC"
    BN = "BN"
    ACT = "ACT"
    POOL_MAX = "POOL_MAX"
    POOL_AVG = "POOL_AVG"
    SHORTCUT = "SHORTCUT"


# continuation token of the extraction alphabet; never valid inside a ModelSpec
CONT = "CONT"

# fixed class order used by the classifier head
ALPHABET: tuple[str, ...] = tuple(t.value for t in LayerType) + (CONT,)

Dims = tuple[int, int, int]
FilterDims = tuple[int, int, int, int]


class UnknownBenchmark(KeyError):
    pass


class InvalidConfig(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


class InvalidModel(ValueError):
    def __init__(self, violations: list[Violation]):
        self.violations = violations
        super().__init__("; ".join(str(v) for v in violations))


@dataclass(frozen=True)
class LayerSpec:
    index: int
    type: LayerType
    ifm_dims: Dims
    ofm_dims: Dims
    filter_dims: FilterDims | None = None
    stride: int | None = None
    pad: int | None = None
    shortcut_from: int | None = None

    @property
    def has_filter(self) -> bool:
        return self.type in (LayerType.CONV, LayerType.FC)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    element_bytes: int = 4

    def layer_types(self) -> list[LayerType]:
        """The ground-truth layer sequence L*."""
        return [l.type for l in self.layers]

    def __len__(self) -> int:
        return len(self.layers)


@dataclass(frozen=True)
class Violation:
    layer: int | None
    message: str

    def __str__(self) -> str:
        where = "model" if self.layer is None else f"layer {self.layer}"
        return f"{where}: {self.message}"


# ---------------------------------------------------------------------------
# validation


def _shortcut_compatible(src: Dims, dst: Dims) -> bool:
    # Darknet's shortcut adds min(channels) and samples the source with an
    # integral spatial stride, so only the spatial ratio has to be uniform.
    if src == dst:
        return True
    _, sh, sw = src
    _, dh, dw = dst
    if sh % dh or sw % dw:
        return False
    return sh // dh == sw // dw


def validate_model(spec: ModelSpec) -> list[Violation]:
    """Check every ModelSpec/LayerSpec invariant; an empty list means valid."""
    out: list[Violation] = []
    if spec.element_bytes < 1:
        out.append(Violation(None, "element_bytes must be >= 1"))
    if not spec.layers:
        out.append(Violation(None, "model has no layers"))
        return out
    if not any(l.has_filter for l in spec.layers):
        out.append(Violation(None, "model needs at least one CONV or FC layer"))

    for pos, layer in enumerate(spec.layers):
        i = layer.index
        if i != pos:
            out.append(Violation(pos, f"index {i} does not match position {pos}"))
        if not isinstance(layer.type, LayerType):
            out.append(Violation(i, f"unknown layer type {layer.type!r}"))
            continue
        for label, dims in (("ifm", layer.ifm_dims), ("ofm", layer.ofm_dims)):
            if len(dims) != 3 or any(int(d) < 1 for d in dims):
                out.append(Violation(i, f"{label} dims must be three values >= 1, got {dims}"))
        if layer.filter_dims is not None and (
            len(layer.filter_dims) != 4 or any(int(d) < 1 for d in layer.filter_dims)
        ):
            out.append(Violation(i, f"filter dims must be four values >= 1, got {layer.filter_dims}"))

        if layer.has_filter and layer.filter_dims is None:
            out.append(Violation(i, f"{layer.type.value} layer requires filter dims"))
        if not layer.has_filter and layer.filter_dims is not None:
            out.append(Violation(i, f"{layer.type.value} layer must not carry filter dims"))

        if pos > 0:
            prev = spec.layers[pos - 1].ofm_dims
            if tuple(layer.ifm_dims) != tuple(prev):
                out.append(Violation(i, f"ifm {layer.ifm_dims} != previous ofm {prev}"))

        out.extend(_check_shape_rules(spec, pos, layer))
    return out


def _check_shape_rules(spec: ModelSpec, pos: int, layer: LayerSpec) -> list[Violation]:
    i = layer.index
    v: list[Violation] = []
    c, h, w = layer.ifm_dims
    oc, oh, ow = layer.ofm_dims
    t = layer.type

    if t in (LayerType.CONV, LayerType.POOL_MAX, LayerType.POOL_AVG):
        if layer.stride is not None and layer.stride < 1:
            v.append(Violation(i, "stride must be >= 1"))
        if layer.pad is not None and layer.pad < 0:
            v.append(Violation(i, "pad must be >= 0"))
    elif layer.stride is not None or layer.pad is not None:
        v.append(Violation(i, f"{t.value} layer must not carry stride/pad"))

    if t is not LayerType.SHORTCUT and layer.shortcut_from is not None:
        v.append(Violation(i, "only SHORTCUT layers may reference a source"))

    if t is LayerType.CONV and layer.filter_dims is not None:
        ci, kh, kw, co = layer.filter_dims
        if ci != c:
            v.append(Violation(i, f"filter in_channels {ci} != ifm channels {c}"))
        if co != oc:
            v.append(Violation(i, f"filter out_channels {co} != ofm channels {oc}"))
        if layer.stride is not None and layer.pad is not None:
            eh = (h + 2 * layer.pad - kh) // layer.stride + 1
            ew = (w + 2 * layer.pad - kw) // layer.stride + 1
            if (eh, ew) != (oh, ow):
                v.append(Violation(i, f"ofm spatial {(oh, ow)} != conv arithmetic {(eh, ew)}"))
    elif t is LayerType.FC and layer.filter_dims is not None:
        ci, kh, kw, co = layer.filter_dims
        if (kh, kw) != (1, 1):
            v.append(Violation(i, "FC filter must be 1x1"))
        if (oh, ow) != (1, 1):
            v.append(Violation(i, "FC ofm must be 1x1 spatially"))
        if ci != c * h * w:
            v.append(Violation(i, f"FC in_channels {ci} != flattened ifm {c * h * w}"))
        if co != oc:
            v.append(Violation(i, f"filter out_channels {co} != ofm channels {oc}"))
    elif t in (LayerType.BN, LayerType.ACT, LayerType.SHORTCUT):
        if tuple(layer.ofm_dims) != tuple(layer.ifm_dims):
            v.append(Violation(i, f"{t.value} must preserve dims"))
    elif t in (LayerType.POOL_MAX, LayerType.POOL_AVG):
        if oc != c or oh > h or ow > w:
            v.append(Violation(i, "pooling must keep channels and not grow spatially"))

    if t is LayerType.SHORTCUT:
        src = layer.shortcut_from
        if src is None:
            v.append(Violation(i, "SHORTCUT requires shortcut_from"))
        elif not 0 <= src < pos:
            v.append(Violation(i, f"shortcut_from {src} must reference an earlier layer"))
        elif not _shortcut_compatible(tuple(spec.layers[src].ofm_dims), tuple(layer.ofm_dims)):
            v.append(
                Violation(
                    i,
                    f"shortcut source ofm {spec.layers[src].ofm_dims} incompatible with {layer.ofm_dims}",
                )
            )
    return v


def check_model(spec: ModelSpec) -> ModelSpec:
    violations = validate_model(spec)
    if violations:
        raise InvalidModel(violations)
    return spec


# ---------------------------------------------------------------------------
# incremental builder shared by the catalog and the random generator


class _Builder:
    def __init__(self, name: str, input_dims: Dims, element_bytes: int = 4):
        self.name = name
        self.dims: Dims = input_dims
        self.layers: list[LayerSpec] = []
        self.element_bytes = element_bytes

    @property
    def last(self) -> int:
        return len(self.layers) - 1

    def _add(self, **kw: Any) -> int:
        idx = len(self.layers)
        ofm = kw.pop("ofm")
        self.layers.append(LayerSpec(index=idx, ifm_dims=self.dims, ofm_dims=ofm, **kw))
        self.dims = ofm
        return idx

    def conv(self, filters: int, size: int, stride: int = 1, pad: int | None = None) -> int:
        c, h, w = self.dims
        if pad is None:
            pad = size // 2
        oh = (h + 2 * pad - size) // stride + 1
        ow = (w + 2 * pad - size) // stride + 1
        return self._add(
            type=LayerType.CONV,
            ofm=(filters, oh, ow),
            filter_dims=(c, size, size, filters),
            stride=stride,
            pad=pad,
        )

    def fc(self, outputs: int) -> int:
        c, h, w = self.dims
        return self._add(type=LayerType.FC, ofm=(outputs, 1, 1), filter_dims=(c * h * w, 1, 1, outputs))

    def bn(self) -> int:
        return self._add(type=LayerType.BN, ofm=self.dims)

    def act(self) -> int:
        return self._add(type=LayerType.ACT, ofm=self.dims)

    def maxpool(self, size: int = 2, stride: int = 2, pad: int = 0) -> int:
        c, h, w = self.dims
        oh = max(1, (h + 2 * pad - size) // stride + 1)
        ow = max(1, (w + 2 * pad - size) // stride + 1)
        return self._add(type=LayerType.POOL_MAX, ofm=(c, oh, ow), stride=stride, pad=pad)

    def avgpool(self) -> int:
        c, h, w = self.dims
        return self._add(type=LayerType.POOL_AVG, ofm=(c, 1, 1), stride=max(h, w), pad=0)

    def shortcut(self, source: int) -> int:
        return self._add(type=LayerType.SHORTCUT, ofm=self.dims, shortcut_from=source)

    def conv_block(
        self, filters: int, size: int, stride: int = 1, bn: bool = True, act: bool = True, pad: int | None = None
    ) -> int:
        idx = self.conv(filters, size, stride, pad)
        if bn:
            idx = self.bn()
        if act:
            idx = self.act()
        return idx

    def build(self) -> ModelSpec:
        return ModelSpec(self.name, tuple(self.layers), self.element_bytes)


# ---------------------------------------------------------------------------
# benchmark catalog (Darknet classification cfgs; BN/ACT split into layers)


def _alexnet() -> ModelSpec:
    b = _Builder("alexnet", (3, 227, 227))
    b.conv_block(96, 11, 4, bn=False, pad=0)
    b.maxpool(3, 2)
    b.conv_block(256, 5, 1, bn=False)
    b.maxpool(3, 2)
    b.conv_block(384, 3, 1, bn=False)
    b.conv_block(384, 3, 1, bn=False)
    b.conv_block(256, 3, 1, bn=False)
    b.maxpool(3, 2)
    b.fc(4096)
    b.act()
    b.fc(4096)
    b.act()
    b.fc(1000)
    return b.build()


def _vgg16() -> ModelSpec:
    b = _Builder("vgg16", (3, 224, 224))
    for filters, reps in ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3)):
        for _ in range(reps):
            b.conv_block(filters, 3, bn=False)
        b.maxpool()
    b.fc(4096)
    b.act()
    b.fc(4096)
    b.act()
    b.fc(1000)
    return b.build()


def _reference() -> ModelSpec:
    b = _Builder("reference", (3, 256, 256))
    for filters in (16, 32, 64, 128, 256, 512):
        b.conv_block(filters, 3)
        b.maxpool()
    b.conv_block(1024, 3)
    b.conv(1000, 1)
    b.avgpool()
    return b.build()


def _tiny_darknet() -> ModelSpec:
    b = _Builder("tiny-darknet", (3, 224, 224))
    b.conv_block(16, 3)
    b.maxpool()
    b.conv_block(32, 3)
    b.maxpool()
    for squeeze, expand in ((16, 128), (16, 128)):
        b.conv_block(squeeze, 1)
        b.conv_block(expand, 3)
    b.maxpool()
    for squeeze, expand in ((32, 256), (32, 256)):
        b.conv_block(squeeze, 1)
        b.conv_block(expand, 3)
    b.maxpool()
    for squeeze, expand in ((64, 512), (64, 512)):
        b.conv_block(squeeze, 1)
        b.conv_block(expand, 3)
    b.conv_block(128, 1)
    b.conv(1000, 1)
    b.avgpool()
    return b.build()


def _extraction() -> ModelSpec:
    b = _Builder("extraction", (3, 224, 224))
    b.conv_block(64, 7, 2)
    b.maxpool()
    b.conv_block(192, 3)
    b.maxpool()
    b.conv_block(128, 1)
    b.conv_block(256, 3)
    b.conv_block(256, 1)
    b.conv_block(512, 3)
    b.maxpool()
    for _ in range(4):
        b.conv_block(256, 1)
        b.conv_block(512, 3)
    b.conv_block(512, 1)
    b.conv_block(1024, 3)
    b.maxpool()
    for _ in range(2):
        b.conv_block(512, 1)
        b.conv_block(1024, 3)
    b.conv(1000, 1)
    b.avgpool()
    return b.build()


def _resnet(name: str, bottleneck: bool, stages: tuple[int, ...]) -> ModelSpec:
    b = _Builder(name, (3, 224, 224))
    b.conv_block(64, 7, 2)
    b.maxpool(3, 2, 1)
    widths = (64, 128, 256, 512)
    for stage, (width, reps) in enumerate(zip(widths, stages)):
        for r in range(reps):
            stride = 2 if stage > 0 and r == 0 else 1
            entry = b.last
            if bottleneck:
                b.conv_block(width, 1, 1)
                b.conv_block(width, 3, stride)
                b.conv_block(width * 4, 1, 1, act=False)
            else:
                b.conv_block(width, 3, stride)
                b.conv_block(width, 3, 1, act=False)
            b.shortcut(entry)
    b.avgpool()
    b.fc(1000)
    return b.build()


_CATALOG = {
    "alexnet": _alexnet,
    "vgg16": _vgg16,
    "reference": _reference,
    "tiny-darknet": _tiny_darknet,
    "extraction": _extraction,
    "resnet18": lambda: _resnet("resnet18", False, (2, 2, 2, 2)),
    "resnet50": lambda: _resnet("resnet50", True, (3, 4, 6, 3)),
    "resnet101": lambda: _resnet("resnet101", True, (3, 4, 23, 3)),
}

BENCHMARKS: tuple[str, ...] = tuple(_CATALOG)
SEQUENTIAL_BENCHMARKS = ("alexnet", "vgg16", "reference", "tiny-darknet", "extraction")
NON_SEQUENTIAL_BENCHMARKS = ("resnet18", "resnet50", "resnet101")


def build_benchmark(name: str) -> ModelSpec:
    try:
        factory = _CATALOG[name]
    except KeyError:
        raise UnknownBenchmark(f"unknown benchmark {name!r}; choose from {', '.join(BENCHMARKS)}") from None
    return check_model(factory())


# ---------------------------------------------------------------------------
# random models for the training corpus


@dataclass(frozen=True)
class RandomModelConfig:
    """Knobs of the random-architecture grammar.

    Models are built from CONV[-BN][-ACT] blocks with optional pooling between
    blocks and optional residual pairs closed by a SHORTCUT back to the block
    entry. Whether a model uses BN, and whether its pooling is placed after
    every block, is drawn once per model so each model has a consistent
    style, like the benchmark family.
    """

    min_layers: int = 12
    max_layers: int = 90
    shortcut_probability: float = 0.3
    dim_ranges: dict[str, tuple[int, int]] = field(
        default_factory=lambda: {
            "channels": (8, 1024),
            "spatial": (56, 256),
            "kernel": (1, 7),
            "fc": (10, 4096),
        }
    )
    bn_probability: float = 0.6
    pool_probability: float = 0.5
    act_probability: float = 0.95
    fc_head_probability: float = 0.5

    def check(self) -> None:
        if self.min_layers < 3:
            raise InvalidConfig("min_layers must be >= 3")
        if self.max_layers < self.min_layers:
            raise InvalidConfig("max_layers must be >= min_layers")
        if not self.dim_ranges:
            raise InvalidConfig("dim_ranges must not be empty")
        for key in ("channels", "spatial"):
            if key not in self.dim_ranges:
                raise InvalidConfig(f"dim_ranges needs {key!r}")
        for key, rng in self.dim_ranges.items():
            if len(rng) != 2 or rng[0] < 1 or rng[1] < rng[0]:
                raise InvalidConfig(f"dim range {key}={rng} is empty or inverted")
        for key in ("shortcut_probability", "bn_probability", "pool_probability", "act_probability",
                    "fc_head_probability"):
            p = getattr(self, key)
            if not 0.0 <= p <= 1.0:
                raise InvalidConfig(f"{key} must lie in [0, 1]")

    def to_dict(self) -> dict[str, Any]:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["dim_ranges"] = {k: list(v) for k, v in self.dim_ranges.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RandomModelConfig:
        d = dict(d)
        if "dim_ranges" in d:
            d["dim_ranges"] = {k: tuple(v) for k, v in d["dim_ranges"].items()}
        return cls(**d)


def _log_uniform_int(rng: np.random.Generator, lo: int, hi: int) -> int:
    return int(round(math.exp(rng.uniform(math.log(lo), math.log(hi)))))


_MAX_FLATTEN = 16384


def generate_random_model(cfg: RandomModelConfig, seed: int) -> ModelSpec:
    """Draw one valid architecture; identical (cfg, seed) gives an identical model."""
    cfg.check()
    rng = np.random.default_rng(seed)
    ch_lo, ch_hi = cfg.dim_ranges["channels"]
    sp_lo, sp_hi = cfg.dim_ranges["spatial"]
    k_lo, k_hi = cfg.dim_ranges.get("kernel", (1, 7))
    fc_lo, fc_hi = cfg.dim_ranges.get("fc", (10, 4096))
    kernels = [k for k in (1, 3, 5, 7, 11) if k_lo <= k <= k_hi] or [k_lo]

    n_layers = int(rng.integers(cfg.min_layers, cfg.max_layers + 1))
    use_bn = rng.random() < cfg.bn_probability
    pool_every_block = rng.random() < cfg.pool_probability
    fc_head = rng.random() < cfg.fc_head_probability
    spatial = int(rng.integers(sp_lo, sp_hi + 1))
    b = _Builder(f"random-{seed}", (3, spatial, spatial))

    def budget() -> int:
        return n_layers - len(b.layers)

    def draw_channels(prev: int) -> int:
        if rng.random() < 0.5:
            return int(np.clip(prev * int(rng.choice([1, 2])), ch_lo, ch_hi))
        return int(np.clip(_log_uniform_int(rng, ch_lo, ch_hi), ch_lo, ch_hi))

    def add_conv(filters: int, size: int, stride: int, act: bool) -> None:
        b.conv(filters, size, stride)
        if use_bn and budget() > 0:
            b.bn()
        if act and budget() > 0:
            b.act()

    # head: a pooling layer then 1-3 FC layers with activations between them,
    # or a 1x1 conv then global pooling
    if fc_head:
        n_fc = int(rng.choice([1, 2, 3], p=[0.5, 0.25, 0.25]))
        head = ["pool"] + ["fc", "act"] * (n_fc - 1) + ["fc"]
    else:
        head = ["conv1x1", "avg"]
    reserved = len(head)
    if n_layers - reserved < 1:
        head, reserved = [], 0

    channels = int(np.clip(_log_uniform_int(rng, ch_lo, max(ch_lo, min(ch_hi, 64))), ch_lo, ch_hi))
    first = True
    while budget() > reserved:
        _, h, _ = b.dims
        residual = (
            not first
            and cfg.shortcut_probability > 0
            and rng.random() < cfg.shortcut_probability
        )
        if residual:
            entry = b.last
            c_entry = b.dims[0]
            add_conv(c_entry, int(rng.choice([k for k in kernels if k <= 3] or kernels)), 1, True)
            if budget() > reserved:
                add_conv(c_entry, int(rng.choice([k for k in kernels if k <= 3] or kernels)), 1, False)
            if budget() > reserved and b.dims == b.layers[entry].ofm_dims:
                b.shortcut(entry)
        else:
            channels = draw_channels(channels)
            size = int(rng.choice(kernels))
            stride = 2 if (first and h >= 128 and rng.random() < 0.5) or (h >= 8 and rng.random() < 0.1) else 1
            add_conv(channels, size, stride, rng.random() < cfg.act_probability)
        first = False
        _, h, _ = b.dims
        if budget() > reserved and h >= 4 and (pool_every_block or rng.random() < 0.25):
            b.maxpool()

    for part in head:
        if budget() <= 0:
            break
        if part == "pool":
            c, h, w = b.dims
            # flatten a small map directly after a maxpool, else pool globally
            if h >= 4 and c * (h // 2) * (w // 2) <= _MAX_FLATTEN and rng.random() < 0.5:
                b.maxpool()
            else:
                b.avgpool()
        elif part == "avg":
            b.avgpool()
        elif part == "fc":
            b.fc(_log_uniform_int(rng, fc_lo, fc_hi))
        elif part == "act":
            b.act()
        elif part == "conv1x1":
            b.conv(_log_uniform_int(rng, fc_lo, fc_hi), 1)
    return check_model(b.build())


# ---------------------------------------------------------------------------
# JSON serialization

_LAYER_KEYS = {"index", "type", "ifm", "ofm", "filter", "stride", "pad", "shortcut_from"}
_MODEL_KEYS = {"name", "element_bytes", "layers"}


def model_to_dict(spec: ModelSpec) -> dict[str, Any]:
    layers = []
    for l in spec.layers:
        d: dict[str, Any] = {
            "index": l.index,
            "type": l.type.value,
            "ifm": list(l.ifm_dims),
            "ofm": list(l.ofm_dims),
        }
        if l.filter_dims is not None:
            d["filter"] = list(l.filter_dims)
        if l.stride is not None:
            d["stride"] = l.stride
        if l.pad is not None:
            d["pad"] = l.pad
        if l.shortcut_from is not None:
            d["shortcut_from"] = l.shortcut_from
        layers.append(d)
    return {"name": spec.name, "element_bytes": spec.element_bytes, "layers": layers}


def _dims(value: Any, n: int, what: str) -> tuple[int, ...]:
    if not isinstance(value, list) or len(value) != n or not all(isinstance(v, int) for v in value):
        raise ModelFormatError(f"{what} must be a list of {n} integers")
    return tuple(value)


def model_from_dict(d: dict[str, Any]) -> ModelSpec:
    if not isinstance(d, dict):
        raise ModelFormatError("model document must be a JSON object")
    unknown = set(d) - _MODEL_KEYS
    if unknown:
        raise ModelFormatError(f"unknown model fields: {sorted(unknown)}")
    if "name" not in d or "layers" not in d:
        raise ModelFormatError("model document needs 'name' and 'layers'")
    layers = []
    for raw in d["layers"]:
        unknown = set(raw) - _LAYER_KEYS
        if unknown:
            raise ModelFormatError(f"unknown layer fields: {sorted(unknown)}")
        try:
            ltype = LayerType(raw["type"])
        except (KeyError, ValueError):
            raise ModelFormatError(f"bad layer type {raw.get('type')!r}") from None
        layers.append(
            LayerSpec(
                index=int(raw["index"]),
                type=ltype,
                ifm_dims=_dims(raw["ifm"], 3, "ifm"),
                ofm_dims=_dims(raw["ofm"], 3, "ofm"),
                filter_dims=_dims(raw["filter"], 4, "filter") if "filter" in raw else None,
                stride=raw.get("stride"),
                pad=raw.get("pad"),
                shortcut_from=raw.get("shortcut_from"),
            )
        )
    return ModelSpec(str(d["name"]), tuple(layers), int(d.get("element_bytes", 4)))


def dumps_model(spec: ModelSpec) -> str:
    return json.dumps(model_to_dict(spec), indent=1, sort_keys=True) + "\n"


def save_model(spec: ModelSpec, path: str | Path) -> None:
    Path(path).write_text(dumps_model(spec))


def load_model(path: str | Path) -> ModelSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ModelFormatError(f"{path}: not valid JSON ({e})") from None
    return model_from_dict(doc)


def collapse(labels: Iterable[str | LayerType]) -> list[LayerType]:
    """Drop CONT tokens; every remaining token starts a new layer."""
    out = []
    for lab in labels:
        value = lab.value if isinstance(lab, LayerType) else lab
        if value != CONT:
            out.append(LayerType(value))
    return out
