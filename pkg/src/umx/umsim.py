"""Unified-Memory execution simulator producing per-kernel hint traces.

Lazy allocation: every OFM/FILTER region starts host-resident. The first
kernel to touch a region raises a far fault batch; a first-touch FILTER read
also migrates the weights over the interconnect. OFM first touches fault but
migrate nothing, since the fill kernel initializes fresh pages.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from umx.lowering import KernelSequence, RegionKind, filter_bytes, ofm_bytes
from umx.model_zoo import CONT, LayerSpec

# column order of every hint matrix in the package
HINTS: tuple[str, ...] = (
    "PFLat",
    "MigLat",
    "MigSize",
    "L2read",
    "L2write",
    "DRAMread",
    "DRAMwrite",
    "KernelLat",
)
HINT_FIELDS: dict[str, str] = {
    "PFLat": "pflat_us",
    "MigLat": "miglat_us",
    "MigSize": "migsize_bytes",
    "L2read": "l2_read_bytes",
    "L2write": "l2_write_bytes",
    "DRAMread": "dram_read_bytes",
    "DRAMwrite": "dram_write_bytes",
    "KernelLat": "kernel_lat_us",
}
_COL = {h: i for i, h in enumerate(HINTS)}

# target run-to-run CoV per hint
DEFAULT_COV: dict[str, float] = {
    "L2write": 0.0017,
    "DRAMwrite": 0.22,
    "L2read": 0.46,
    "DRAMread": 0.51,
    "KernelLat": 0.11,
    "PFLat": 0.095,
    "MigLat": 0.012,
    "MigSize": 0.0081,
}

# additive resolution floor of hints recovered by snooping the host link:
# PFLat in us, MigSize in bytes, MigLat in us
SNOOP_FLOOR: dict[str, float] = {
    "PFLat": 150.0,
    "MigSize": 786432.0,
    "MigLat": 75.0,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MemoryConfig:
    page_bytes: int = 65536
    fault_service_us: float = 20.0
    per_page_fault_us: float = 4.0
    migration_bandwidth_bytes_per_us: float = 12000.0
    migration_per_page_us: float = 1.0
    l2_capacity_bytes: int = 6 * 1024 * 1024
    base_kernel_us_per_flop_scale: float = 3e-5

    def check(self) -> None:
        for name, value in asdict(self).items():
            if not value > 0:
                raise ConfigError(f"MemoryConfig.{name} must be strictly positive, got {value}")

    def pages(self, nbytes: int) -> int:
        return -(-int(nbytes) // self.page_bytes)

    def page_align(self, nbytes: int) -> int:
        return self.pages(nbytes) * self.page_bytes


@dataclass(frozen=True)
class NoiseProfile:
    """Per-hint run-to-run coefficient of variation of a lognormal factor.

    ``floor`` optionally adds a half-normal measurement floor (absolute units,
    per hint) to every kernel, including ones whose true value is zero.
    """

    cov: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_COV))
    floor: dict[str, float] = field(default_factory=dict)

    def check(self) -> None:
        for table in (self.cov, self.floor):
            for name, value in table.items():
                if name not in _COL:
                    raise ConfigError(f"unknown hint {name!r} in noise profile")
                if value < 0:
                    raise ConfigError(f"noise for {name} must be >= 0")

    @classmethod
    def noiseless(cls) -> NoiseProfile:
        return cls(cov={h: 0.0 for h in HINTS})

    @classmethod
    def snooped(cls) -> NoiseProfile:
        """Default run-to-run noise plus the link-snooping resolution floor."""
        return cls(floor=dict(SNOOP_FLOOR))

    def to_dict(self) -> dict[str, Any]:
        return {"cov": dict(self.cov), "floor": dict(self.floor)}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> NoiseProfile:
        return cls(cov=dict(d.get("cov", DEFAULT_COV)), floor=dict(d.get("floor", {})))


@dataclass(frozen=True)
class ArchHintVector:
    pflat_us: float
    miglat_us: float
    migsize_bytes: float
    l2_read_bytes: float
    l2_write_bytes: float
    dram_read_bytes: float
    dram_write_bytes: float
    kernel_lat_us: float

    @classmethod
    def from_row(cls, row: np.ndarray) -> ArchHintVector:
        return cls(**{HINT_FIELDS[h]: float(row[i]) for i, h in enumerate(HINTS)})

    def as_row(self) -> np.ndarray:
        return np.array([getattr(self, HINT_FIELDS[h]) for h in HINTS], dtype=float)


@dataclass(frozen=True)
class KernelMeta:
    position: int
    kernel_name: str
    layer_index: int
    truth_label: str


@dataclass(frozen=True, eq=False)
class Trace:
    """One simulated run; ``values`` holds one row per kernel in HINTS order."""

    model_name: str
    run_seed: int
    kernel_names: tuple[str, ...]
    layer_index: np.ndarray
    truth_labels: tuple[str, ...]
    values: np.ndarray
    header: dict[str, Any] = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.kernel_names)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return (
            self.model_name == other.model_name
            and self.run_seed == other.run_seed
            and self.kernel_names == other.kernel_names
            and self.truth_labels == other.truth_labels
            and np.array_equal(self.layer_index, other.layer_index)
            and np.array_equal(self.values, other.values)
        )

    def column(self, hint: str) -> np.ndarray:
        return self.values[:, _COL[hint]]

    @property
    def records(self) -> Iterator[tuple[KernelMeta, ArchHintVector]]:
        for i, name in enumerate(self.kernel_names):
            meta = KernelMeta(i, name, int(self.layer_index[i]), self.truth_labels[i])
            yield meta, ArchHintVector.from_row(self.values[i])

    def n_layers(self) -> int:
        return int(self.layer_index.max()) + 1 if len(self) else 0


# ---------------------------------------------------------------------------
# noiseless model


def footprint(layer: LayerSpec, element_bytes: int = 4) -> dict[str, int]:
    return {"ofm_bytes": ofm_bytes(layer, element_bytes), "filter_bytes": filter_bytes(layer, element_bytes)}


def noiseless_hints(seq: KernelSequence, mem: MemoryConfig) -> np.ndarray:
    """Deterministic per-kernel hint matrix (kernels x HINTS)."""
    mem.check()
    out = np.zeros((len(seq.kernels), len(HINTS)))
    for k in seq.kernels:
        faulted_pages = 0
        migrated = 0
        for acc in k.reads + k.writes:
            if not acc.first_touch:
                continue
            faulted_pages += mem.pages(acc.region.bytes)
            if acc.region.kind is RegionKind.FILTER and acc in k.reads:
                migrated += mem.page_align(acc.region.bytes)
        pflat = mem.fault_service_us + mem.per_page_fault_us * faulted_pages if faulted_pages else 0.0
        miglat = 0.0
        if migrated:
            miglat = migrated / mem.migration_bandwidth_bytes_per_us + mem.migration_per_page_us * mem.pages(
                migrated
            )

        read_b = k.read_bytes
        write_b = k.write_bytes
        cap = mem.l2_capacity_bytes

        row = out[k.position]
        row[_COL["PFLat"]] = pflat
        row[_COL["MigLat"]] = miglat
        row[_COL["MigSize"]] = migrated
        row[_COL["L2read"]] = read_b
        row[_COL["L2write"]] = min(write_b, cap)
        # coarse device-memory estimate: L2 fills and write-backs per launch
        # are bounded by the cache capacity; tile reuse beyond it is not modeled
        row[_COL["DRAMread"]] = min(read_b, cap)
        row[_COL["DRAMwrite"]] = min(write_b, cap)
        row[_COL["KernelLat"]] = mem.base_kernel_us_per_flop_scale * k.flop_scale + pflat + miglat
    return out


# ---------------------------------------------------------------------------
# noisy runs


def _lognormal_params(cov: float) -> tuple[float, float]:
    sigma2 = math.log1p(cov * cov)
    return -0.5 * sigma2, math.sqrt(sigma2)


def _layer_factors(rng: np.random.Generator, n_layers: int, noise: NoiseProfile) -> np.ndarray:
    # one factor per (layer, hint): run-to-run drift is shared by the kernels
    # of a layer, so the layer-level hint keeps the configured CoV
    z = rng.standard_normal((n_layers, len(HINTS)))
    fac = np.ones_like(z)
    for h, j in _COL.items():
        c = float(noise.cov.get(h, 0.0))
        if c > 0:
            mu, sigma = _lognormal_params(c)
            fac[:, j] = np.exp(mu + sigma * z[:, j])
    return fac


def _trace_header(seq: KernelSequence, mem: MemoryConfig, noise: NoiseProfile, seed: int) -> dict[str, Any]:
    return {"model": seq.model.name, "seed": int(seed), "mem_config": asdict(mem),
            "noise_profile": noise.to_dict()}


def simulate_run(
    seq: KernelSequence,
    mem: MemoryConfig,
    noise: NoiseProfile,
    seed: int,
    base: np.ndarray | None = None,
) -> Trace:
    """Simulate one UM execution; ``base`` may pass precomputed noiseless hints."""
    mem.check()
    noise.check()
    if base is None:
        base = noiseless_hints(seq, mem)
    layer_idx = np.array([k.layer_index for k in seq.kernels], dtype=np.int64)
    n_layers = len(seq.model.layers)
    rng = np.random.default_rng(seed)
    fac = _layer_factors(rng, n_layers, noise)
    values = base * fac[layer_idx]
    if noise.floor:
        extra = np.zeros_like(values)
        draws = np.abs(rng.standard_normal(values.shape))
        for h, s in noise.floor.items():
            extra[:, _COL[h]] = s * draws[:, _COL[h]]
        values = values + extra
    return Trace(
        model_name=seq.model.name,
        run_seed=int(seed),
        kernel_names=tuple(k.kernel_name for k in seq.kernels),
        layer_index=layer_idx,
        truth_labels=tuple(k.truth_label for k in seq.kernels),
        values=values,
        header=_trace_header(seq, mem, noise, seed),
    )


def simulate_samples(
    seq: KernelSequence, mem: MemoryConfig, noise: NoiseProfile, base_seed: int, runs: int
) -> list[Trace]:
    if runs < 1:
        raise ValueError("runs must be >= 1")
    base = noiseless_hints(seq, mem)
    return [simulate_run(seq, mem, noise, base_seed + r, base=base) for r in range(runs)]


# ---------------------------------------------------------------------------
# JSONL trace files


class TraceFormatError(ValueError):
    pass


def write_trace(trace: Trace, path: str | Path) -> None:
    header = dict(trace.header) or {"model": trace.model_name, "seed": trace.run_seed}
    header.setdefault("model", trace.model_name)
    header.setdefault("seed", trace.run_seed)
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for meta, vec in trace.records:
            rec = {"pos": meta.position, "kernel": meta.kernel_name, "layer_index": meta.layer_index,
                   "truth_label": meta.truth_label}
            rec.update({f: getattr(vec, f) for f in HINT_FIELDS.values()})
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_trace(path: str | Path) -> Trace:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise TraceFormatError(f"{path}: empty trace file")
    try:
        header = json.loads(lines[0])
        recs = [json.loads(line) for line in lines[1:] if line.strip()]
    except json.JSONDecodeError as e:
        raise TraceFormatError(f"{path}: {e}") from None
    if "model" not in header:
        raise TraceFormatError(f"{path}: header lacks 'model'")
    missing = [f for f in HINT_FIELDS.values() if recs and f not in recs[0]]
    if missing:
        raise TraceFormatError(f"{path}: records lack hint fields {missing}")
    values = np.array([[r[HINT_FIELDS[h]] for h in HINTS] for r in recs], dtype=float).reshape(len(recs), len(HINTS))
    return Trace(
        model_name=str(header["model"]),
        run_seed=int(header.get("seed", 0)),
        kernel_names=tuple(r["kernel"] for r in recs),
        layer_index=np.array([r["layer_index"] for r in recs], dtype=np.int64),
        truth_labels=tuple(r.get("truth_label", CONT) for r in recs),
        values=values,
        header=header,
    )
