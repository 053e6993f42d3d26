"""Coefficient-of-variation statistics and the hint effectiveness score."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from umx.umsim import HINTS, Trace

EPSILON = 1e-9


class EmptySeries(ValueError):
    pass


class TooFewLayers(ValueError):
    pass


class TooFewRuns(ValueError):
    pass


class MixedModels(ValueError):
    pass


@dataclass(frozen=True)
class StatSummary:
    mean: float
    std: float
    cov: float
    defined: bool


def cov(series: Sequence[float] | np.ndarray) -> StatSummary:
    """Population CoV. A zero-mean series is flagged undefined with cov=0."""
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        raise EmptySeries("cov of an empty series")
    mu = float(x.mean())
    # an exactly constant series has zero spread regardless of rounding in std
    sd = 0.0 if np.all(x == x.flat[0]) else float(x.std())
    if mu == 0.0:
        return StatSummary(mu, sd, 0.0, False)
    return StatSummary(mu, sd, sd / abs(mu), True)


def distinguishability(per_layer_means: Sequence[float] | np.ndarray) -> float:
    """CoV across the per-layer mean values of one hint."""
    x = np.asarray(per_layer_means, dtype=float)
    if x.size < 2:
        raise TooFewLayers("distinguishability needs at least 2 layers")
    return cov(x).cov


def _per_layer_cov(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = samples.mean(axis=1)
    sd = samples.std(axis=1)
    sd[np.all(samples == samples[:, :1], axis=1)] = 0.0
    defined = mu != 0
    c = np.zeros_like(mu)
    c[defined] = sd[defined] / np.abs(mu[defined])
    return c, defined


def consistency(samples: np.ndarray, aggregate: str = "mean") -> tuple[float, int]:
    """Per-layer CoV over runs, aggregated over layers where it is defined.

    ``samples`` is layers x runs. Returns (aggregated CoV, undefined layer count).
    """
    s = np.asarray(samples, dtype=float)
    if s.ndim == 1:
        s = s[None, :]
    if s.shape[1] < 2:
        raise TooFewRuns("consistency needs at least 2 runs")
    c, defined = _per_layer_cov(s)
    n_undefined = int((~defined).sum())
    if not defined.any():
        return 0.0, n_undefined
    vals = c[defined]
    if aggregate == "mean":
        agg = float(vals.mean())
    elif aggregate == "median":
        agg = float(np.median(vals))
    else:
        raise ValueError(f"unknown aggregate {aggregate!r}")
    return agg, n_undefined


def arch_es(cov_dis: float, cov_con: float, eps: float = EPSILON) -> tuple[float, bool]:
    """Effectiveness score dis/con; returns (score, clamped)."""
    if cov_dis < 0 or cov_con < 0:
        raise ValueError("CoVs must be non-negative")
    clamped = cov_con < eps
    return cov_dis / max(cov_con, eps), clamped


@dataclass(frozen=True)
class HintScore:
    cov_dis: float
    cov_con: float
    arch_es: float
    con_undefined_layers: int
    epsilon_clamped: bool


@dataclass(frozen=True)
class ArchESReport:
    hints: dict[str, HintScore]
    epsilon: float = EPSILON
    aggregate: str = "mean"
    dis_layers: str = "all"
    n_runs: int = 0
    n_layers: int = 0
    notes: dict[str, str] = field(default_factory=dict)

    def ranking(self) -> list[str]:
        return sorted(self.hints, key=lambda h: -self.hints[h].arch_es)

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["hint", "cov_dis", "cov_con", "arch_es", "undefined_layers", "epsilon_clamped"])
            for h in self.ranking():
                s = self.hints[h]
                w.writerow([h, f"{s.cov_dis:.6g}", f"{s.cov_con:.6g}", f"{s.arch_es:.6g}",
                            s.con_undefined_layers, int(s.epsilon_clamped)])


def layer_samples(traces: Sequence[Trace]) -> np.ndarray:
    """Sum each layer's kernels per run: array (hints, layers, runs)."""
    if len(traces) < 2:
        raise TooFewRuns("need >= 2 runs")
    n_k = len(traces[0])
    for t in traces[1:]:
        if len(t) != n_k or t.model_name != traces[0].model_name:
            raise MixedModels("traces disagree on model or kernel count")
    idx = traces[0].layer_index
    n_layers = int(idx.max()) + 1
    out = np.zeros((len(HINTS), n_layers, len(traces)))
    for r, t in enumerate(traces):
        for j in range(len(HINTS)):
            out[j, :, r] = np.bincount(idx, weights=t.values[:, j], minlength=n_layers)
    return out


def score_report(
    traces: Sequence[Trace],
    *,
    aggregate: str = "mean",
    dis_layers: str = "all",
    eps: float = EPSILON,
) -> ArchESReport:
    """Score all eight hints from repeated runs of one model.

    ``dis_layers="all"`` computes distinguishability over every layer's mean
    (layers where the hint is absent count as zeros); ``"nonzero"`` drops them.
    Consistency always skips layers whose mean is zero.
    """
    if dis_layers not in ("all", "nonzero"):
        raise ValueError("dis_layers must be 'all' or 'nonzero'")
    samples = layer_samples(traces)
    n_layers = samples.shape[1]
    scores: dict[str, HintScore] = {}
    for j, h in enumerate(HINTS):
        s = samples[j]
        means = s.mean(axis=1)
        dis_vals = means if dis_layers == "all" else means[means != 0]
        dis = distinguishability(dis_vals) if dis_vals.size >= 2 else 0.0
        con, undefined = consistency(s, aggregate)
        score, clamped = arch_es(dis, con, eps)
        scores[h] = HintScore(dis, con, score, undefined, clamped)
    return ArchESReport(scores, eps, aggregate, dis_layers, len(traces), n_layers)


def ranks_equal(report: ArchESReport, order: Sequence[str]) -> bool:
    return report.ranking() == list(order)


def _finite(x: float) -> bool:
    return math.isfinite(x)
