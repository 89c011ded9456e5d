"""Analytical energy / latency model from per-operation costs.

Every multiply-accumulate of a network kind maps to a pair of primitive
operations; energy and latency are the MAC count times the pair's summed
cost on a given processor (serial, single issue).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layer import LookupConv2d
from .nn import Conv2d, Linear, Module
from .tensor import Tensor, no_grad

OP_KINDS = ("float-add", "float-mul", "4bit-add", "4bit-mul", "xnor", "shift", "lookup")

# energy in pJ, latency in cycles; None where the processor has no figure
_ENERGY = {
    "a7": (199, 203, 82, 146, 72, None, 150),
    "a15": (1471, 1714, 432, 846, 394, None, 452),
}
_LATENCY = {
    "a7": (4, 4, 1, 3, 1, 1, 1),
    "a15": (5, 5, 1, 3, 1, 1, 1),
}

# primitive op pair per MAC
NETWORK_KINDS = {
    "baseline": ("float-mul", "float-add"),
    "lookup": ("lookup", "float-add"),
    "lookup-4bit": ("lookup", "4bit-add"),
    "adder": ("float-add", "float-add"),
    "bnn": ("xnor", "float-add"),
    "shift": ("shift", "float-add"),
}

# the published op counts use binary prefixes (1M = 2**20)
MEGA = 2 ** 20


class CostNotAvailable(ValueError):
    """The processor table has no energy figure for an operation."""


@dataclass(frozen=True)
class OpCostTable:
    processor: str
    energy_pj: dict
    latency_cycles: dict

    @classmethod
    def default(cls, processor: str) -> "OpCostTable":
        key = processor.lower().replace("cortex-", "")
        if key not in _ENERGY:
            raise ValueError(f"unknown processor {processor!r}; expected a7 or a15")
        return cls(key, dict(zip(OP_KINDS, _ENERGY[key])), dict(zip(OP_KINDS, _LATENCY[key])))

    def energy(self, op: str) -> float:
        value = self.energy_pj[op]
        if value is None:
            raise CostNotAvailable(f"no energy figure for {op!r} on {self.processor}")
        return value

    def latency(self, op: str) -> int:
        return self.latency_cycles[op]


@dataclass
class CostProfile:
    """MAC counts per layer; ``included`` masks out the preserved first/last layers."""

    layers: list[str] = field(default_factory=list)
    macs: list[int] = field(default_factory=list)
    included: list[bool] = field(default_factory=list)

    @property
    def total_macs(self) -> int:
        return int(sum(m for m, inc in zip(self.macs, self.included) if inc))

    @property
    def ops(self) -> int:
        return 2 * self.total_macs

    @classmethod
    def from_ops(cls, ops: float, name: str = "network") -> "CostProfile":
        """Profile from a published operation total (``ops = 2 * MACs``)."""
        return cls([name], [ops / 2], [True])


def count_ops(net: Module, input_shape, include_boundary: bool = False) -> CostProfile:
    """MACs of every conv / lookup / linear layer for one input of ``input_shape`` (C, H, W).

    The first and last layers (and BN, which folds away) are left out of the
    total unless ``include_boundary``.
    """
    x = Tensor(np.zeros((1,) + tuple(input_shape), dtype=np.float32))
    was_training = net.training
    net.eval()
    try:
        with no_grad():
            net(x)
    finally:
        net.train(was_training)
    profile = CostProfile()
    for name, m in net.named_modules():
        if isinstance(m, (Conv2d, LookupConv2d)):
            if not hasattr(m, "last_output_shape"):
                raise ValueError(f"layer {name} has no resolved shape")
            profile.layers.append(name)
            profile.macs.append(m.macs())
        elif isinstance(m, Linear):
            profile.layers.append(name)
            profile.macs.append(m.macs())
    profile.included = [True] * len(profile.layers)
    if profile.layers and not include_boundary:
        profile.included[0] = False
        profile.included[-1] = False
    return profile


def estimate(profile: CostProfile | float, kind: str, processor: str | OpCostTable) -> dict:
    """Energy (mJ) and latency (cycles) for ``profile`` run as a ``kind`` network."""
    if kind not in NETWORK_KINDS:
        raise ValueError(f"unknown network kind {kind!r}; expected one of {sorted(NETWORK_KINDS)}")
    table = processor if isinstance(processor, OpCostTable) else OpCostTable.default(processor)
    macs = profile if isinstance(profile, (int, float)) else profile.total_macs
    op1, op2 = NETWORK_KINDS[kind]
    energy_pj = macs * (table.energy(op1) + table.energy(op2))
    cycles = macs * (table.latency(op1) + table.latency(op2))
    return {"energy_mj": energy_pj * 1e-9, "latency_cycles": cycles, "macs": macs, "ops": 2 * macs}


def table_memory(n_layers: int, n_f: int = 33, n_w: int | None = None, bytes_per_entry: int = 4,
                 out_channels: list[int] | None = None) -> dict:
    """Table storage: one shared table per layer, and per-channel tables after BN folding."""
    if bytes_per_entry < 1:
        raise ValueError("bytes_per_entry must be at least 1")
    n_w = n_f if n_w is None else n_w
    per_layer = n_f * n_w * bytes_per_entry
    out = {"per_layer_bytes": per_layer, "shared_total_bytes": per_layer * n_layers}
    if out_channels is not None:
        out["fused_total_bytes"] = per_layer * int(sum(out_channels))
    return out


def format_mega(value: float) -> str:
    return f"{value / MEGA:.0f}M"


__all__ = [
    "MEGA",
    "NETWORK_KINDS",
    "OP_KINDS",
    "CostNotAvailable",
    "CostProfile",
    "OpCostTable",
    "count_ops",
    "estimate",
    "format_mega",
    "table_memory",
]
