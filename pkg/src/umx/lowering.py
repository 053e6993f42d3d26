"""Lower a ModelSpec into the kernel launch sequence of a Darknet-style runtime."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

from umx.model_zoo import CONT, LayerSpec, LayerType, ModelSpec, check_model, collapse


class RegionKind(str, enum.Enum):
    IFM = "IFM"
    OFM = "OFM"
    FILTER = "FILTER"


@dataclass(frozen=True)
class MemRegion:
    id: int
    kind: RegionKind
    owner_layer: int
    bytes: int


@dataclass(frozen=True)
class Access:
    region: MemRegion
    first_touch: bool


@dataclass(frozen=True)
class KernelEvent:
    position: int
    kernel_name: str
    layer_index: int
    truth_label: str
    reads: tuple[Access, ...]
    writes: tuple[Access, ...]
    flop_scale: float

    @property
    def read_bytes(self) -> int:
        return sum(a.region.bytes for a in self.reads)

    @property
    def write_bytes(self) -> int:
        return sum(a.region.bytes for a in self.writes)


@dataclass(frozen=True)
class KernelSequence:
    model: ModelSpec
    kernels: tuple[KernelEvent, ...]
    regions: tuple[MemRegion, ...]

    def __len__(self) -> int:
        return len(self.kernels)


def _prod(dims) -> int:
    return math.prod(int(d) for d in dims)


def filter_bytes(layer: LayerSpec, element_bytes: int) -> int:
    if layer.filter_dims is None:
        return 0
    return _prod(layer.filter_dims) * element_bytes


def ofm_bytes(layer: LayerSpec, element_bytes: int) -> int:
    return _prod(layer.ofm_dims) * element_bytes


def _flop_scale(layer: LayerSpec) -> float:
    out = _prod(layer.ofm_dims)
    if layer.filter_dims is not None:
        ci, kh, kw, _ = layer.filter_dims
        # FC stores the flattened input as in_channels, so ci*kh*kw is the
        # multiply-accumulate count per output element for both CONV and FC.
        return float(out * ci * kh * kw)
    return float(out)


# kernel plans: (name, reads, writes) where each entry names a region role
_PLANS: dict[LayerType, list[tuple[str, tuple[str, ...], tuple[str, ...]]]] = {
    LayerType.CONV: [
        ("fill_kernel", (), ("ofm",)),
        ("im2col_kernel", ("ifm",), ()),
        ("gemm_kernel", ("filter", "ifm"), ("ofm",)),
    ],
    LayerType.FC: [
        ("fill_kernel", (), ("ofm",)),
        ("gemm_tn_kernel", ("filter", "ifm"), ("ofm",)),
        ("axpy_kernel", ("ofm",), ("ofm",)),
    ],
    LayerType.BN: [
        ("normalize_kernel", ("ofm",), ("ofm",)),
        ("scale_bias_kernel", ("ofm",), ("ofm",)),
        ("add_bias_kernel", ("ofm",), ("ofm",)),
    ],
    LayerType.ACT: [
        ("activate_kernel", ("ofm",), ("ofm",)),
    ],
    LayerType.POOL_MAX: [
        ("maxpool_kernel", ("ifm",), ("ofm",)),
    ],
    LayerType.POOL_AVG: [
        ("avgpool_kernel", ("ifm",), ("ofm",)),
    ],
    LayerType.SHORTCUT: [
        ("copy_kernel", ("source",), ("ofm",)),
        ("shortcut_kernel", ("ifm", "ofm"), ("ofm",)),
        ("activate_kernel", ("ofm",), ("ofm",)),
    ],
}

# BN and ACT run in place on their producer's output buffer
_IN_PLACE = (LayerType.BN, LayerType.ACT)


def lower_to_kernels(spec: ModelSpec) -> KernelSequence:
    """Emit the kernel sequence with region touch lists and first-touch flags.

    The network input is staged by the host before the first launch, so reads
    of it never fault; every other region starts non-resident and is flagged
    on its first access anywhere in the sequence.
    """
    check_model(spec)
    eb = spec.element_bytes
    regions: list[MemRegion] = []

    def new_region(kind: RegionKind, owner: int, nbytes: int) -> MemRegion:
        r = MemRegion(len(regions), kind, owner, nbytes)
        regions.append(r)
        return r

    model_input = new_region(RegionKind.IFM, 0, _prod(spec.layers[0].ifm_dims) * eb)
    out_region: list[MemRegion] = []
    filter_region: dict[int, MemRegion] = {}
    for layer in spec.layers:
        if layer.type in _IN_PLACE:
            src = out_region[layer.index - 1] if layer.index > 0 else model_input
            out_region.append(src)
        else:
            out_region.append(new_region(RegionKind.OFM, layer.index, ofm_bytes(layer, eb)))
        if layer.has_filter:
            filter_region[layer.index] = new_region(RegionKind.FILTER, layer.index, filter_bytes(layer, eb))

    touched: set[int] = {model_input.id}
    kernels: list[KernelEvent] = []
    for layer in spec.layers:
        i = layer.index
        roles = {
            "ifm": out_region[i - 1] if i > 0 else model_input,
            "ofm": out_region[i],
            "filter": filter_region.get(i),
            "source": out_region[layer.shortcut_from] if layer.shortcut_from is not None else None,
        }
        scale = _flop_scale(layer)
        for k, (name, reads, writes) in enumerate(_PLANS[layer.type]):
            acc_r: list[Access] = []
            acc_w: list[Access] = []
            for role_list, acc in ((reads, acc_r), (writes, acc_w)):
                for role in role_list:
                    region = roles[role]
                    first = region.id not in touched
                    touched.add(region.id)
                    acc.append(Access(region, first))
            compute = name in ("gemm_kernel", "gemm_tn_kernel")
            kernels.append(
                KernelEvent(
                    position=len(kernels),
                    kernel_name=name,
                    layer_index=i,
                    truth_label=layer.type.value if k == 0 else CONT,
                    reads=tuple(acc_r),
                    writes=tuple(acc_w),
                    flop_scale=scale if compute else float(_prod(layer.ofm_dims)),
                )
            )
    return KernelSequence(spec, tuple(kernels), tuple(regions))


def truth_labels(seq: KernelSequence) -> list[str]:
    return [k.truth_label for k in seq.kernels]


def kernel_to_dict(k: KernelEvent) -> dict:
    def acc(a: Access) -> dict:
        return {"region": a.region.id, "kind": a.region.kind.value, "bytes": a.region.bytes,
                "first_touch": a.first_touch}

    return {
        "pos": k.position,
        "kernel": k.kernel_name,
        "layer_index": k.layer_index,
        "truth_label": k.truth_label,
        "reads": [acc(a) for a in k.reads],
        "writes": [acc(a) for a in k.writes],
        "flop_scale": k.flop_scale,
    }


def dump_jsonl(seq: KernelSequence, path: str | Path) -> None:
    with open(path, "w") as fh:
        for k in seq.kernels:
            fh.write(json.dumps(kernel_to_dict(k), sort_keys=True) + "\n")


__all__ = [
    "Access",
    "KernelEvent",
    "KernelSequence",
    "MemRegion",
    "RegionKind",
    "collapse",
    "dump_jsonl",
    "filter_bytes",
    "lower_to_kernels",
    "ofm_bytes",
    "truth_labels",
]
