"""Learnable 2D lookup tables built from cumulative softmax sub-tables.

The table for one layer is the outer product of a feature sub-table
``T_f`` (``N_f`` entries rising from 0 to 1) and a weight sub-table ``T_w``
(``N_w`` entries rising from -1 through 0 to +1).  Both are cumulative sums
of softmax masses, so monotonicity and the [-1, 1] bound hold for any
logits.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Module, Parameter
from .tensor import Tensor, get_default_dtype, make_node

TABLE_MODES = ("cumulative", "fixed", "independent-random", "independent-step")


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _cumulate(masses: np.ndarray) -> np.ndarray:
    # running sum can overshoot 1 by an ulp; clamp keeps the last entry exact
    return np.minimum(np.cumsum(masses), 1.0)


def build_feature_subtable(logits) -> np.ndarray:
    """``T_f`` from ``N_f - 1`` logits: ``[0, p1, p1+p2, ..., 1]``."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size < 1:
        raise ValueError("feature sub-table needs at least one logit")
    if not np.isfinite(logits).all():
        raise ValueError("feature logits must be finite")
    table = np.empty(logits.size + 1)
    table[0] = 0.0
    table[1:] = _cumulate(_softmax(logits))
    table[-1] = 1.0
    return table


def build_weight_subtable(logits_neg, logits_pos) -> np.ndarray:
    """``T_w`` with ``N_w = 2m + 1`` entries, accumulating outward from the zero centre.

    The first negative mass sits next to zero, mirroring the positive side.
    """
    neg = np.asarray(logits_neg, dtype=np.float64)
    pos = np.asarray(logits_pos, dtype=np.float64)
    if neg.ndim != 1 or pos.ndim != 1 or neg.size < 1:
        raise ValueError("weight sub-table needs at least one logit per side")
    if neg.size != pos.size:
        raise ValueError(
            f"negative and positive logits differ in length ({neg.size} vs {pos.size}); N_w must be odd"
        )
    if not (np.isfinite(neg).all() and np.isfinite(pos).all()):
        raise ValueError("weight logits must be finite")
    m = pos.size
    table = np.empty(2 * m + 1)
    table[m] = 0.0
    table[m + 1:] = _cumulate(_softmax(pos))
    table[:m] = -_cumulate(_softmax(neg))[::-1]
    table[-1], table[0] = 1.0, -1.0
    return table


def cumulative_mass_grad(grad_entries: np.ndarray) -> np.ndarray:
    """Adjoint of the prefix sum: gradient on each mass ``p_k`` from gradients on entries ``T[1:]``.

    Mass ``k`` feeds every entry at or after position ``k``.
    """
    g = np.asarray(grad_entries, dtype=np.float64)
    return np.cumsum(g[::-1])[::-1]


def softmax_backward(logits: np.ndarray, grad_masses: np.ndarray) -> np.ndarray:
    p = _softmax(logits)
    return p * (grad_masses - np.dot(p, grad_masses))


def feature_subtable_grad(logits, grad_entries) -> np.ndarray:
    """Gradient on feature logits given gradients on all ``N_f`` entries (entry 0 is constant)."""
    grad_entries = np.asarray(grad_entries, dtype=np.float64)
    return softmax_backward(np.asarray(logits, dtype=np.float64), cumulative_mass_grad(grad_entries[1:]))


def weight_subtable_grad(logits_neg, logits_pos, grad_entries) -> tuple[np.ndarray, np.ndarray]:
    grad_entries = np.asarray(grad_entries, dtype=np.float64)
    m = len(logits_pos)
    g_pos = cumulative_mass_grad(grad_entries[m + 1:])
    # entries left of centre are negated and ordered outward from the centre
    g_neg = cumulative_mass_grad(-grad_entries[:m][::-1])
    return (softmax_backward(np.asarray(logits_neg, dtype=np.float64), g_neg),
            softmax_backward(np.asarray(logits_pos, dtype=np.float64), g_pos))


@dataclass
class CellCounts:
    """Per-entry hit counters for the two sub-tables of one layer."""

    feature: np.ndarray
    weight: np.ndarray

    @classmethod
    def zeros(cls, n_f: int, n_w: int) -> "CellCounts":
        return cls(np.zeros(n_f, dtype=np.int64), np.zeros(n_w, dtype=np.int64))

    def record(self, idx_f, idx_w, times: int = 1) -> None:
        np.add.at(self.feature, np.asarray(idx_f), times)
        np.add.at(self.weight, np.asarray(idx_w), times)

    def add_histograms(self, feature_hist: np.ndarray, weight_hist: np.ndarray) -> None:
        self.feature += np.asarray(feature_hist, dtype=np.int64)
        self.weight += np.asarray(weight_hist, dtype=np.int64)

    def merge(self, other: "CellCounts") -> "CellCounts":
        return CellCounts(self.feature + other.feature, self.weight + other.weight)

    def reset(self) -> None:
        self.feature[:] = 0
        self.weight[:] = 0

    @staticmethod
    def average(counts: np.ndarray) -> float:
        return float(counts.sum()) / counts.size


def rescale_factors(counts) -> np.ndarray:
    """``sqrt(N_avg / N_i)`` per cell; cells that were never hit keep factor 1."""
    counts = np.asarray(counts, dtype=np.float64)
    factors = np.ones_like(counts)
    hit = counts > 0
    if hit.any():
        n_avg = counts.sum() / counts.size
        factors[hit] = np.sqrt(n_avg / counts[hit])
    return factors


def rescale_gradients(grads, counts) -> np.ndarray:
    grads = np.asarray(grads)
    return grads * rescale_factors(counts).astype(grads.dtype if grads.dtype.kind == "f" else np.float64)


class LookupTable(Module):
    """Per-layer ``N_f x N_w`` table and its parameterisation.

    ``mode`` selects how the sub-tables are parameterised:

    * ``"cumulative"`` -- cumulative softmax over learnable logits (default).
    * ``"fixed"`` -- uniform ramps, never updated.
    * ``"independent-random"`` / ``"independent-step"`` -- every sub-table
      entry is a free parameter, initialised from U(0, 1) (U(-1, 1) on the
      weight axis) or from evenly spaced steps.

    ``grad_rescale`` enables the per-cell ``sqrt(N_avg / N_i)`` gradient
    balancing; hit counts come from the lookup layer's forward pass.
    """

    def __init__(self, n_f: int = 33, n_w: int = 33, mode: str = "cumulative", grad_rescale: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if n_f < 2:
            raise ValueError("N_f must be at least 2")
        if n_w < 3 or n_w % 2 == 0:
            raise ValueError(f"N_w must be odd and at least 3, got {n_w}")
        if mode not in TABLE_MODES:
            raise ValueError(f"unknown table mode {mode!r}; expected one of {TABLE_MODES}")
        self.n_f, self.n_w, self.mode, self.grad_rescale = n_f, n_w, mode, grad_rescale
        self.counts = CellCounts.zeros(n_f, n_w)
        m = (n_w - 1) // 2
        self.feature_logits = self.weight_logits_neg = self.weight_logits_pos = None
        self.feature_entries_param = self.weight_entries_param = None
        if mode == "cumulative":
            self.feature_logits = Parameter(np.zeros(n_f - 1), role="table")
            self.weight_logits_neg = Parameter(np.zeros(m), role="table")
            self.weight_logits_pos = Parameter(np.zeros(m), role="table")
        elif mode == "fixed":
            dtype = get_default_dtype()
            self.register_buffer("fixed_feature", np.linspace(0.0, 1.0, n_f).astype(dtype))
            self.register_buffer("fixed_weight", np.linspace(-1.0, 1.0, n_w).astype(dtype))
        elif mode == "independent-random":
            rng = rng if rng is not None else np.random.default_rng(0)
            self.feature_entries_param = Parameter(rng.uniform(0.0, 1.0, n_f), role="table")
            self.weight_entries_param = Parameter(rng.uniform(-1.0, 1.0, n_w), role="table")
        else:
            self.feature_entries_param = Parameter(np.linspace(0.0, 1.0, n_f), role="table")
            self.weight_entries_param = Parameter(np.linspace(-1.0, 1.0, n_w), role="table")

    @classmethod
    def from_subtables(cls, feature_entries, weight_entries) -> "LookupTable":
        """A frozen table with explicit sub-table entries (e.g. the exact-product table)."""
        feature_entries = np.asarray(feature_entries, dtype=np.float64)
        weight_entries = np.asarray(weight_entries, dtype=np.float64)
        table = cls(len(feature_entries), len(weight_entries), mode="fixed", grad_rescale=False)
        table._buffers["fixed_feature"] = feature_entries.astype(get_default_dtype())
        table._buffers["fixed_weight"] = weight_entries.astype(get_default_dtype())
        return table

    @classmethod
    def exact_product(cls, n_f: int, n_w: int) -> "LookupTable":
        """Entries ``i/(N_f-1) * (2j/(N_w-1) - 1)``: lookups reproduce quantised multiplication."""
        return cls.from_subtables(np.arange(n_f) / (n_f - 1), 2.0 * np.arange(n_w) / (n_w - 1) - 1.0)

    @property
    def center(self) -> int:
        return (self.n_w - 1) // 2

    def feature_entries(self) -> np.ndarray:
        if self.mode == "cumulative":
            values = build_feature_subtable(self.feature_logits.data)
        elif self.mode == "fixed":
            values = self._buffers["fixed_feature"]
        else:
            values = self.feature_entries_param.data
        return np.asarray(values, dtype=get_default_dtype())

    def weight_entries(self) -> np.ndarray:
        if self.mode == "cumulative":
            values = build_weight_subtable(self.weight_logits_neg.data, self.weight_logits_pos.data)
        elif self.mode == "fixed":
            values = self._buffers["fixed_weight"]
        else:
            values = self.weight_entries_param.data
        return np.asarray(values, dtype=get_default_dtype())

    def table(self) -> np.ndarray:
        """Materialised ``N_f x N_w`` table ``T[i, j] = T_f[i] * T_w[j]``."""
        return np.outer(self.feature_entries(), self.weight_entries())

    def lookup(self, idx_f: int, idx_w: int) -> float:
        """Single response ``T_f[idx_f] * T_w[idx_w]``; records one hit per sub-table."""
        if not (0 <= idx_f < self.n_f and 0 <= idx_w < self.n_w):
            raise IndexError(f"table index ({idx_f}, {idx_w}) outside {self.n_f}x{self.n_w}")
        self.counts.record(idx_f, idx_w)
        return float(self.feature_entries()[idx_f]) * float(self.weight_entries()[idx_w])

    def reset_counts(self) -> None:
        self.counts.reset()

    def _maybe_rescale(self, grad_f: np.ndarray, grad_w: np.ndarray):
        if self.grad_rescale and self.training:
            grad_f = rescale_gradients(grad_f, self.counts.feature)
            grad_w = rescale_gradients(grad_w, self.counts.weight)
        return grad_f, grad_w

    def subtable_backward(self, grad_f, grad_w) -> dict[str, np.ndarray]:
        """Map gradients on sub-table entries to gradients on the underlying parameters.

        Gradient re-scaling (when enabled) is applied per entry first.
        """
        grad_f, grad_w = self._maybe_rescale(np.asarray(grad_f, np.float64), np.asarray(grad_w, np.float64))
        if self.mode == "cumulative":
            g_neg, g_pos = weight_subtable_grad(self.weight_logits_neg.data, self.weight_logits_pos.data, grad_w)
            return {
                "feature_logits": feature_subtable_grad(self.feature_logits.data, grad_f),
                "weight_logits_neg": g_neg,
                "weight_logits_pos": g_pos,
            }
        if self.mode == "fixed":
            return {}
        return {"feature_entries_param": grad_f, "weight_entries_param": grad_w}

    def materialize(self) -> Tensor:
        """Both sub-tables packed as one graph node ``[T_f, T_w]`` whose backward reaches the parameters."""
        tf, tw = self.feature_entries(), self.weight_entries()
        if self.mode == "fixed":
            return Tensor(np.concatenate([tf, tw]))
        if self.mode == "cumulative":
            parents = (self.feature_logits, self.weight_logits_neg, self.weight_logits_pos)
        else:
            parents = (self.feature_entries_param, self.weight_entries_param)
        n_f = self.n_f
        packed = np.concatenate([tf, tw])

        def grad_fn(g):
            grads = self.subtable_backward(g[:n_f], g[n_f:])
            if self.mode == "cumulative":
                return grads["feature_logits"], grads["weight_logits_neg"], grads["weight_logits_pos"]
            return grads["feature_entries_param"], grads["weight_entries_param"]

        return make_node(packed, parents, grad_fn, "lookup_table")

    def is_monotone(self) -> bool:
        tf, tw = self.feature_entries(), self.weight_entries()
        return bool(np.all(np.diff(tf) >= 0) and np.all(np.diff(tw) >= 0))


def lookup(table: LookupTable, idx_f: int, idx_w: int) -> float:
    return table.lookup(idx_f, idx_w)


__all__ = [
    "TABLE_MODES",
    "CellCounts",
    "LookupTable",
    "build_feature_subtable",
    "build_weight_subtable",
    "cumulative_mass_grad",
    "feature_subtable_grad",
    "lookup",
    "rescale_factors",
    "rescale_gradients",
    "softmax_backward",
    "weight_subtable_grad",
]
