"""The training-time lookup layer.

Per receptive-field element the layer (1) normalises weight and feature by
positive scales and discretises them into table indices, (2) reads the
response from the layer's table, (3) multiplies it back by ``s_w * s_f`` and
(4) accumulates over the patch and adds the bias.

Backward follows straight-through rules: discretisation passes gradients
inside the clip range only, and the lookup's slope along each index is
taken as 1 in normalised units.  ``ste="product"`` keeps the other
sub-table's entry as the multiplier (product rule on ``T_f * T_w``);
``ste="literal"`` uses a bare 1.
"""
from __future__ import annotations

import logging
import math

import numpy as np

from .functional import _check_conv_shapes, col2im, conv_output_size, im2col
from .nn import Module, Parameter
from .table import LookupTable
from .tensor import Tensor, make_node

log = logging.getLogger(__name__)

STE_MODES = ("product", "literal")


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest integer, ties away from zero (``np.round`` would round ties to even)."""
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def compute_indices(values, scale: float, kind: str, n: int) -> np.ndarray:
    """Discretise weights (``kind="weight"``, clip to [-1, 1]) or features (clip to [0, 1]) into ``0..n-1``."""
    values = np.asarray(values)
    if not np.isfinite(values).all():
        raise ValueError("cannot index non-finite values")
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    u = values / scale
    if kind == "weight":
        pos = (np.clip(u, -1.0, 1.0) + 1.0) / 2.0 * (n - 1)
    elif kind == "feature":
        pos = np.clip(u, 0.0, 1.0) * (n - 1)
    else:
        raise ValueError(f"kind must be 'weight' or 'feature', got {kind!r}")
    return round_half_away(pos).astype(np.int64)


# closed-form pieces of the backward pass --------------------------------

def weight_index_grad(w, s_w):
    """``(d idx_w/d w, d idx_w/d s_w)`` in normalised index units; zero outside ``|w| < s_w``."""
    w = np.asarray(w, dtype=np.float64)
    inside = np.abs(w) < s_w
    return np.where(inside, 1.0 / s_w, 0.0), np.where(inside, -w / s_w ** 2, 0.0)


def feature_index_grad(f, s_f):
    f = np.asarray(f, dtype=np.float64)
    inside = (f >= 0) & (f < s_f)
    return np.where(inside, 1.0 / s_f, 0.0), np.where(inside, -f / s_f ** 2, 0.0)


def response_index_grad(other_entry, ste: str = "product"):
    """Slope of the response along one index: the other sub-table's entry, or 1 for ``ste="literal"``."""
    if ste == "literal":
        return np.ones_like(np.asarray(other_entry, dtype=np.float64))
    return np.asarray(other_entry, dtype=np.float64)


def rescale_grad(r, s_w, s_f):
    """Partials of ``s_w * s_f * r`` with respect to ``r``, ``s_w`` and ``s_f``."""
    r = np.asarray(r, dtype=np.float64)
    return np.full_like(r, s_w * s_f), s_f * r, s_w * r


def addition_grad(n_terms: int) -> np.ndarray:
    return np.ones(n_terms)


# scale parameters ---------------------------------------------------------

def init_scales(weights, features) -> tuple[float, float]:
    """Initial ``(e_w, e_f)`` as ``ln(3 * std)``; falls back to 0 for degenerate statistics."""
    out = []
    for name, values in (("weight", weights), ("feature", features)):
        sigma = float(np.std(np.asarray(values, dtype=np.float64)))
        if sigma > 0 and math.isfinite(sigma):
            out.append(math.log(3.0 * sigma))
        else:
            log.warning("%s standard deviation is %s; initialising its scale exponent to 0", name, sigma)
            out.append(0.0)
    return out[0], out[1]


class ScaleParams(Module):
    """Per-layer scales ``s_w``, ``s_f``.

    With ``exponential=True`` the trainable values are ``e_w``, ``e_f`` and
    ``s = exp(e)`` is positive by construction; otherwise ``s_w``/``s_f`` are
    trained directly and may change sign.
    """

    def __init__(self, exponential: bool = True):
        super().__init__()
        self.exponential = exponential
        self.w_param = Parameter(0.0, role="scale")
        self.f_param = Parameter(0.0 if exponential else 1.0, role="scale")
        if not exponential:
            self.w_param.data = np.asarray(1.0, dtype=self.w_param.dtype)

    @property
    def s_w(self) -> float:
        v = self.w_param.data
        return np.exp(v) if self.exponential else v

    @property
    def s_f(self) -> float:
        v = self.f_param.data
        return np.exp(v) if self.exponential else v

    @property
    def e_w(self) -> float:
        return float(self.w_param.data) if self.exponential else math.log(float(self.w_param.data))

    @property
    def e_f(self) -> float:
        return float(self.f_param.data) if self.exponential else math.log(float(self.f_param.data))

    def set_from_stats(self, e_w: float, e_f: float) -> None:
        dtype = self.w_param.dtype
        if self.exponential:
            self.w_param.data = np.asarray(e_w, dtype=dtype)
            self.f_param.data = np.asarray(e_f, dtype=dtype)
        else:
            self.w_param.data = np.asarray(math.exp(e_w), dtype=dtype)
            self.f_param.data = np.asarray(math.exp(e_f), dtype=dtype)

    def chain(self, grad_s: float, which: str) -> float:
        """Map a gradient on ``s`` to the trainable parameter."""
        if not self.exponential:
            return grad_s
        return grad_s * float(self.s_w if which == "w" else self.s_f)


class LookupConv2d(Module):
    """Drop-in replacement for a convolution that uses table lookups instead of products."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: int = 0, dilation: int = 1, bias: bool = True, n_f: int = 33, n_w: int = 33,
                 table_mode: str = "cumulative", grad_rescale: bool = True, exponential_scales: bool = True,
                 ste: str = "product", table: LookupTable | None = None, rng: np.random.Generator | None = None):
        super().__init__()
        if ste not in STE_MODES:
            raise ValueError(f"ste must be one of {STE_MODES}, got {ste!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding, self.dilation = kernel_size, stride, padding, dilation
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(rng.normal(0.0, math.sqrt(2.0 / fan_in),
                                           size=(out_channels, in_channels, kernel_size, kernel_size)))
        self.bias = Parameter(np.zeros(out_channels), role="bias") if bias else None
        self.scales = ScaleParams(exponential_scales)
        self.table = table if table is not None else LookupTable(n_f, n_w, table_mode, grad_rescale, rng=rng)
        self.ste = ste
        self.register_buffer("scales_initialized", np.zeros((), dtype=np.int8))

    @property
    def n_f(self) -> int:
        return self.table.n_f

    @property
    def n_w(self) -> int:
        return self.table.n_w

    @property
    def s_w(self) -> float:
        return self.scales.s_w

    @property
    def s_f(self) -> float:
        return self.scales.s_f

    def weight_indices(self) -> np.ndarray:
        return compute_indices(self.weight.data, float(self.s_w), "weight", self.n_w)

    def feature_indices(self, x) -> np.ndarray:
        return compute_indices(np.asarray(x), float(self.s_f), "feature", self.n_f)

    def output_shape(self, input_shape) -> tuple[int, int, int, int]:
        n, _, h, w = input_shape
        k = self.kernel_size
        return (n, self.out_channels, conv_output_size(h, k, self.stride, self.padding, self.dilation),
                conv_output_size(w, k, self.stride, self.padding, self.dilation))

    def macs(self) -> int:
        _, _, ho, wo = self.last_output_shape
        return ho * wo * self.out_channels * self.in_channels * self.kernel_size ** 2

    def forward(self, x: Tensor) -> Tensor:
        _check_conv_shapes(x, self.weight, self.bias)
        if self.training and not self._buffers["scales_initialized"]:
            self.scales.set_from_stats(*init_scales(self.weight.data, x.data))
            self._buffers["scales_initialized"][...] = 1
        out = lookup_conv2d(x, self, record_hits=self.training)
        self.last_input_shape, self.last_output_shape = x.shape, out.shape
        return out


def lookup_conv2d(x: Tensor, layer: LookupConv2d, record_hits: bool = False) -> Tensor:
    """Forward pass of a lookup layer as a single graph node with a custom backward."""
    k, stride, pad, dil = layer.kernel_size, layer.stride, layer.padding, layer.dilation
    n_f, n_w = layer.n_f, layer.n_w
    w = layer.weight.data
    cout = w.shape[0]
    s_w, s_f = float(layer.s_w), float(layer.s_f)
    if not (s_w > 0 and s_f > 0):
        # a sign-reversed scale (possible without the exponential form) inverts the clip range
        log.debug("non-positive scale s_w=%s s_f=%s", s_w, s_f)
    s_w_safe = s_w if s_w != 0 else np.finfo(np.float32).tiny
    s_f_safe = s_f if s_f != 0 else np.finfo(np.float32).tiny
    uw = w / np.asarray(s_w_safe, dtype=w.dtype)
    uf = x.data / np.asarray(s_f_safe, dtype=x.dtype)
    if not (np.isfinite(uw).all() and np.isfinite(uf).all()):
        raise FloatingPointError("non-finite values while scaling lookup-layer inputs")
    idx_w = round_half_away((np.clip(uw, -1.0, 1.0) + 1.0) / 2.0 * (n_w - 1)).astype(np.intp)
    idx_f = round_half_away(np.clip(uf, 0.0, 1.0) * (n_f - 1)).astype(np.intp)

    packed_table = layer.table.materialize()
    tf = packed_table.data[:n_f].astype(np.float64)
    tw = packed_table.data[n_f:].astype(np.float64)
    a_map = tf[idx_f]
    if pad:
        # padded positions hold feature 0, i.e. index 0
        a_map = np.pad(a_map, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=tf[0])
    a_cols = im2col(a_map, k, stride, 0, dil)
    b_mat = tw[idx_w].reshape(cout, -1)
    s_cols = a_cols @ b_mat.T
    out = (s_w * s_f) * s_cols
    if layer.bias is not None:
        out = out + layer.bias.data.astype(np.float64)
    n, _, h, wd = x.shape
    _, _, ho, wo = layer.output_shape(x.shape)
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2).astype(x.dtype)

    if record_hits:
        _record_hits(layer, idx_f, idx_w, x.shape, a_cols.shape[0])

    scales = layer.scales
    padded_shape = (n, x.shape[1], h + 2 * pad, wd + 2 * pad)

    def unpad(arr):
        return arr[:, :, pad:pad + h, pad:pad + wd] if pad else arr

    def grad_fn(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout).astype(np.float64)
        sw_sf = s_w * s_f
        m_cols = gm @ b_mat                       # sum_k G * T_w[idx_w]
        ga = gm.T @ a_cols                        # sum_positions G * T_f[idx_f]
        m_map_padded = col2im(m_cols, padded_shape, k, stride, 0, dil)
        m_map = unpad(m_map_padded)

        grad_tf = np.bincount(idx_f.ravel(), weights=m_map.ravel(), minlength=n_f)
        grad_tf[0] += m_map_padded.sum() - m_map.sum()
        grad_tf *= sw_sf
        grad_tw = sw_sf * np.bincount(idx_w.ravel(), weights=ga.ravel(), minlength=n_w)

        if layer.ste == "literal":
            d_w = np.broadcast_to(gm.sum(axis=0)[:, None], ga.shape)
            d_f_map = unpad(col2im(np.broadcast_to(gm.sum(axis=1)[:, None], m_cols.shape), padded_shape,
                                   k, stride, 0, dil))
        else:
            d_w = ga
            d_f_map = m_map
        gate_w = (np.abs(uw) < 1.0).reshape(cout, -1)
        gate_f = (uf >= 0) & (uf < 1.0)
        grad_w = (s_f * gate_w * d_w).reshape(w.shape)
        grad_x = s_w * gate_f * d_f_map

        gs = float((gm * s_cols).sum())
        grad_sw = s_f * gs - s_f * float((d_w * gate_w * uw.reshape(cout, -1)).sum())
        grad_sf = s_w * gs - s_w * float((d_f_map * gate_f * uf).sum())
        grads = [grad_x, grad_w, scales.chain(grad_sw, "w"), scales.chain(grad_sf, "f")]
        grads.append(np.concatenate([grad_tf, grad_tw]))
        if layer.bias is not None:
            grads.append(gm.sum(axis=0))
        return grads

    parents = [x, layer.weight, scales.w_param, scales.f_param, packed_table]
    if layer.bias is not None:
        parents.append(layer.bias)
    return make_node(out, parents, grad_fn, "lookup_conv2d")


def _record_hits(layer: LookupConv2d, idx_f: np.ndarray, idx_w: np.ndarray, in_shape, n_positions: int) -> None:
    n, c, h, w = in_shape
    k, stride, pad, dil = layer.kernel_size, layer.stride, layer.padding, layer.dilation
    ho, wo = layer.output_shape(in_shape)[2:]
    usage = col2im(np.ones((ho * wo, c * k * k)), (1, c, h, w), k, stride, pad, dil)
    usage = np.rint(usage).astype(np.int64)
    feat = np.bincount(idx_f.ravel(), weights=np.broadcast_to(usage, idx_f.shape).ravel(), minlength=layer.n_f)
    feat = np.rint(feat).astype(np.int64)
    total = n_positions * c * k * k
    feat[0] += total - int(usage.sum()) * n  # zero-padding reads index 0
    cout = layer.out_channels
    layer.table.counts.add_histograms(feat * cout, np.bincount(idx_w.ravel(), minlength=layer.n_w) * n_positions)


def scaled_skip(x: Tensor, in_scale: ScaleParams, out_scale: ScaleParams | None, n_f: int) -> Tensor:
    """Residual path for lookup blocks: quantise ``x`` at the consumer's feature scale, then
    rescale by ``s_out / s_in`` so the skip stays an integer index after re-parameterisation.

    ``out_scale=None`` keeps the factor at 1.
    """
    s_in = float(in_scale.s_f)
    s_out = float(out_scale.s_f) if out_scale is not None else s_in
    u = x.data / s_in
    q = round_half_away(np.clip(u, 0.0, 1.0) * (n_f - 1))
    out = (q * (s_out / (n_f - 1))).astype(x.dtype)
    inside = (u >= 0) & (u < 1.0)

    def grad_fn(g):
        g = g.astype(np.float64)
        gx = g * inside * (s_out / s_in)
        grads = [gx]
        if out_scale is None:
            grads.append(0.0)
            return grads
        # d/ds_in of s_out * x / s_in inside the clip range
        grad_sin = float((g * inside * (-u * s_out / s_in)).sum())
        grad_sout = float((g * q / (n_f - 1)).sum())
        grads.append(in_scale.chain(grad_sin, "f"))
        grads.append(out_scale.chain(grad_sout, "f"))
        return grads

    parents = [x, in_scale.f_param]
    if out_scale is not None:
        parents.append(out_scale.f_param)
    return make_node(out, parents, grad_fn, "scaled_skip")


__all__ = [
    "STE_MODES",
    "LookupConv2d",
    "ScaleParams",
    "addition_grad",
    "compute_indices",
    "feature_index_grad",
    "init_scales",
    "lookup_conv2d",
    "rescale_grad",
    "response_index_grad",
    "round_half_away",
    "scaled_skip",
    "weight_index_grad",
]
