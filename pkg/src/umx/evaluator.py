"""Layer sequence accuracy and the benchmark harness."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from umx.extractor import SequenceClassifier, TrainConfig, extract, train
from umx.lowering import lower_to_kernels
from umx.model_zoo import (
    BENCHMARKS,
    NON_SEQUENTIAL_BENCHMARKS,
    SEQUENTIAL_BENCHMARKS,
    LayerType,
    RandomModelConfig,
    build_benchmark,
    generate_random_model,
)
from umx.umsim import MemoryConfig, NoiseProfile, Trace, noiseless_hints, simulate_run


class EmptyTruth(ValueError):
    pass


class MissingCheckpoint(KeyError):
    pass


def _tokens(seq: Sequence) -> list[str]:
    return [t.value if isinstance(t, LayerType) else str(t) for t in seq]


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Unit-cost Levenshtein distance (insert, delete, substitute)."""
    a = _tokens(a)
    b = _tokens(b)
    prev = list(range(len(b) + 1))
    for i in range(1, len(a) + 1):
        cur = [i] + [0] * len(b)
        for j in range(1, len(b) + 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1]))
        prev = cur
    return prev[-1]


def lsa(pred: Sequence, truth: Sequence) -> float:
    """1 - ED/|truth|. Over-long predictions can make this negative."""
    if len(truth) == 0:
        raise EmptyTruth("layer sequence accuracy needs a non-empty truth")
    return 1.0 - edit_distance(pred, truth) / len(truth)


GROUPS: dict[str, tuple[str, ...]] = {
    "seq": SEQUENTIAL_BENCHMARKS,
    "nonseq": NON_SEQUENTIAL_BENCHMARKS,
    "all": BENCHMARKS,
}


@dataclass(frozen=True)
class CellResult:
    model: str
    hint_set: str
    lsas: tuple[float, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.lsas))

    @property
    def std(self) -> float:
        return float(np.std(self.lsas))


@dataclass
class BenchmarkReport:
    cells: dict[tuple[str, str], CellResult] = field(default_factory=dict)

    def hint_sets(self) -> list[str]:
        return sorted({hs for _, hs in self.cells})

    def models(self) -> list[str]:
        seen: list[str] = []
        for m, _ in self.cells:
            if m not in seen:
                seen.append(m)
        return seen

    def mean(self, model: str, hint_set: str) -> float:
        return self.cells[(model, hint_set)].mean

    def group_mean(self, group: str, hint_set: str) -> float:
        """Mean over the group's models of their per-model mean LSA."""
        members = [m for m in GROUPS[group] if (m, hint_set) in self.cells]
        if not members:
            return float("nan")
        return float(np.mean([self.mean(m, hint_set) for m in members]))

    def write_runs_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "hint_set", "run", "lsa"])
            for (model, hs), cell in self.cells.items():
                for r, v in enumerate(cell.lsas):
                    w.writerow([model, hs, r, f"{v:.6f}"])

    def write_summary_csv(self, path: str | Path) -> None:
        sets = self.hint_sets()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row"] + sets)
            for m in self.models():
                w.writerow([m] + [f"{self.mean(m, hs):.6f}" if (m, hs) in self.cells else "" for hs in sets])
            for g in GROUPS:
                w.writerow([f"group:{g}"] + [f"{self.group_mean(g, hs):.6f}" for hs in sets])


def derive_seed(root: int, tag: str, index: int | str = 0) -> int:
    """Child seed from (root, purpose tag, index); stages never share streams."""
    digest = hashlib.sha256(f"{int(root)}:{tag}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def random_corpus(
    n_models: int,
    cfg: RandomModelConfig,
    mem: MemoryConfig,
    noise: NoiseProfile,
    seed: int,
) -> list[tuple[Trace, tuple[str, ...]]]:
    """One simulated run per random model, paired with its kernel labels."""
    out = []
    for i in range(n_models):
        model = generate_random_model(cfg, derive_seed(seed, "corpus-model", i))
        trace = simulate_run(lower_to_kernels(model), mem, noise, derive_seed(seed, "corpus-trace", i))
        out.append((trace, trace.truth_labels))
    return out


def train_hint_sets(
    corpus: Sequence[tuple[Trace, Sequence[str]]],
    hint_sets: Sequence[str],
    hyper: TrainConfig,
    seed: int,
    log=None,
) -> dict[str, SequenceClassifier]:
    """One classifier per hint set, each with its own derived init seed."""
    out = {}
    for hs in hint_sets:
        cfg = replace(hyper, seed=derive_seed(seed, f"train:{hs}") % (2**31))
        if log is not None:
            log(f"training {hs} on {len(corpus)} traces")
        out[hs] = train(corpus, hs, cfg, log=log)
    return out


def run_benchmark(
    suite: Sequence[str],
    hint_sets: Sequence[str],
    clf_per_set: Mapping[str, SequenceClassifier],
    runs: int = 10,
    mem: MemoryConfig | None = None,
    noise: NoiseProfile | None = None,
    seed: int = 0,
) -> BenchmarkReport:
    """Simulate each benchmark ``runs`` times and score every hint set's extraction.

    Every hint set is scored on the same traces, so per-set differences come
    from the hints alone.
    """
    mem = mem or MemoryConfig()
    noise = noise or NoiseProfile.snooped()
    missing = [hs for hs in hint_sets if hs not in clf_per_set]
    if missing:
        raise MissingCheckpoint(f"no classifier for hint sets {missing}")
    report = BenchmarkReport()
    lsas: dict[tuple[str, str], list[float]] = {(m, hs): [] for m in suite for hs in hint_sets}
    for model in suite:
        seq = lower_to_kernels(build_benchmark(model))
        truth = [l.type for l in seq.model.layers]
        base = noiseless_hints(seq, mem)
        for r in range(runs):
            trace = simulate_run(seq, mem, noise, derive_seed(seed, f"bench:{model}", r), base=base)
            for hs in hint_sets:
                res = extract(clf_per_set[hs], trace)
                lsas[(model, hs)].append(lsa(res.layers, truth))
    for key, vals in lsas.items():
        report.cells[key] = CellResult(key[0], key[1], tuple(vals))
    return report
