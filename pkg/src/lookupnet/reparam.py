"""Conversion of a trained lookup network into its multiplication-free inference form.

The converted body reads integer feature indices, looks up per-output-channel
tables that already contain the re-scaling factor, the batch-norm affine map
and the next layer's scaling factor, adds, and clips/rounds straight back to
indices.  The first and last (full-precision) layers are kept.  A single
explicit scaling step remains where the preserved stem hands over to the
first lookup layer.
"""
from __future__ import annotations

import logging
from collections import Counter, OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .layer import LookupConv2d, compute_indices, round_half_away
from .models import BasicBlock, LookupCNN, LookupResNet, Unit
from .nn import BatchNorm2d, Module
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


class ConversionError(ValueError):
    """Raised when a network cannot be converted faithfully."""


class OpCounter:
    """Operation tallies per segment (``"preserved"``, ``"boundary"``, ``"converted"``) and kind."""

    def __init__(self):
        self.counts: dict[str, Counter] = {}
        self.per_layer: "OrderedDict[str, Counter]" = OrderedDict()

    def add(self, segment: str, kind: str, n: int, layer: str | None = None) -> None:
        self.counts.setdefault(segment, Counter())[kind] += int(n)
        if layer is not None:
            self.per_layer.setdefault(layer, Counter())[kind] += int(n)

    def total(self, kind: str, segment: str | None = None) -> int:
        if segment is not None:
            return self.counts.get(segment, Counter())[kind]
        return sum(c[kind] for c in self.counts.values())

    def as_dict(self) -> dict:
        return {seg: dict(c) for seg, c in self.counts.items()}


def _count(counter, segment, kind, n, layer=None):
    if counter is not None:
        counter.add(segment, kind, n, layer)


# ---------------------------------------------------------------------------
# the inference layer

@dataclass
class ReparamLayer:
    """Lookup layer in inference form.

    ``tables[K]`` is the N_f x N_w table for output channel K.  While
    ``post_scale`` is set (before :func:`fuse_rescale`) the sum is still
    multiplied by it, which the op counter reports as multiplications.
    """

    name: str
    idx_w: np.ndarray
    tables: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    post_scale: float | None = None
    activation: str = "none"          # none | relu | clip_round
    clip_max: int = 0
    fused: list[str] = field(default_factory=list)

    @property
    def out_channels(self) -> int:
        return self.idx_w.shape[0]

    @property
    def in_channels(self) -> int:
        return self.idx_w.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.idx_w.shape[2]

    @property
    def n_f(self) -> int:
        return self.tables.shape[1]

    @property
    def n_w(self) -> int:
        return self.tables.shape[2]

    @classmethod
    def from_lookup(cls, name: str, layer: LookupConv2d) -> "ReparamLayer":
        """Unfused form: weight indices computed offline, shared table broadcast per channel."""
        if not isinstance(layer, LookupConv2d):
            raise ConversionError(f"{name}: expected a lookup layer, got {type(layer).__name__}")
        with no_grad():
            packed = layer.table.materialize().data
        tf = packed[:layer.n_f].astype(np.float64)
        tw = packed[layer.n_f:].astype(np.float64)
        table = np.outer(tf, tw)
        cout = layer.out_channels
        bias = layer.bias.data.astype(np.float64) if layer.bias is not None else np.zeros(cout)
        return cls(name=name, idx_w=layer.weight_indices(), tables=np.repeat(table[None], cout, axis=0),
                   bias=bias.copy(), stride=layer.stride, padding=layer.padding, dilation=layer.dilation,
                   post_scale=float(layer.s_w) * float(layer.s_f))

    def finalize(self) -> "ReparamLayer":
        """Cast to storage dtypes: 8-bit indices when they fit, 32-bit tables and biases."""
        self.idx_w = self.idx_w.astype(np.uint8 if self.n_w <= 256 else np.uint16)
        self.tables = self.tables.astype(np.float32)
        self.bias = self.bias.astype(np.float32)
        return self

    def forward(self, x_idx: np.ndarray, skip: np.ndarray | None = None, counter: OpCounter | None = None,
                segment: str = "converted") -> np.ndarray:
        """Index map in, index map (``clip_round``) or real map out."""
        x_idx = np.asarray(x_idx)
        if x_idx.ndim != 4 or x_idx.shape[1] != self.in_channels:
            raise ValueError(f"{self.name}: expected N x {self.in_channels} x H x W indices, got {x_idx.shape}")
        k, pad = self.kernel_size, self.padding
        n, _, h, w = x_idx.shape
        ho = F.conv_output_size(h, k, self.stride, pad, self.dilation)
        wo = F.conv_output_size(w, k, self.stride, pad, self.dilation)
        if pad:
            x_idx = np.pad(x_idx, ((0, 0), (0, 0), (pad, pad), (pad, pad)))  # index 0 = zero feature
        cols = F.im2col(x_idx.astype(np.int64), k, self.stride, 0, self.dilation) * self.n_w
        j = cols.shape[1]
        out = np.empty((cols.shape[0], self.out_channels))
        wflat = self.idx_w.reshape(self.out_channels, -1).astype(np.int64)
        for c in range(self.out_channels):
            flat = self.tables[c].ravel()
            out[:, c] = flat[cols + wflat[c]].sum(axis=1, dtype=np.float64)
        positions = cols.shape[0] * self.out_channels
        _count(counter, segment, "lookup", positions * j, self.name)
        _count(counter, segment, "add", positions * j, self.name)  # j - 1 accumulations + bias
        if self.post_scale is not None:
            out *= self.post_scale
            _count(counter, segment, "mul", positions, self.name)
        out += self.bias.astype(np.float64)
        out = out.reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)
        if skip is not None:
            out = out + skip
            _count(counter, segment, "residual_add", out.size, self.name)
        if self.activation == "clip_round":
            _count(counter, segment, "clip", out.size, self.name)
            _count(counter, segment, "round", out.size, self.name)
            return round_half_away(np.clip(out, 0, self.clip_max)).astype(np.int64)
        if self.activation == "relu":
            _count(counter, segment, "clip", out.size, self.name)
            return np.maximum(out, 0.0)
        return out


def _bn_stats(bn: BatchNorm2d):
    var = bn.running_var.astype(np.float64)
    denom = var + bn.eps
    if np.any(denom <= 0):
        raise ValueError("batch norm variance + eps must be positive")
    return (bn.gamma.data.astype(np.float64), bn.beta.data.astype(np.float64),
            bn.running_mean.astype(np.float64), np.sqrt(denom))


# ---------------------------------------------------------------------------
# the fusion steps

def fuse_rescale(layer: ReparamLayer) -> ReparamLayer:
    """Move the ``s_w * s_f`` factor from after the sum into the table entries."""
    if layer.post_scale is not None:
        if layer.post_scale != 1.0:
            layer.tables = layer.tables * layer.post_scale
        layer.post_scale = None
    layer.fused.append("rescale")
    return layer


def fuse_batchnorm(layer: ReparamLayer, bn: BatchNorm2d) -> ReparamLayer:
    """Fold a frozen BN into per-channel tables and the bias."""
    if layer.post_scale is not None:
        raise ConversionError(f"{layer.name}: fuse the re-scaling step before batch norm")
    gamma, beta, mu, sigma = _bn_stats(bn)
    if gamma.shape != (layer.out_channels,):
        raise ConversionError(f"{layer.name}: batch norm has {gamma.shape[0]} channels, layer {layer.out_channels}")
    ratio = gamma / sigma
    layer.tables = layer.tables * ratio[:, None, None]
    layer.bias = beta + (gamma * layer.bias - gamma * mu) / sigma
    layer.fused.append("batchnorm")
    return layer


def fuse_scaling(layer: ReparamLayer, consumer: LookupConv2d | None, scale: float | None = None) -> ReparamLayer:
    """Absorb the consumer's ``(N_f - 1) / s_f`` and turn the ReLU into clip + round.

    ``scale`` overrides the consumer's feature scale (used on residual
    paths).  Without a lookup consumer the layer keeps a plain ReLU.
    """
    if not isinstance(consumer, LookupConv2d):
        log.info("%s: consumer is not a lookup layer; scaling step kept", layer.name)
        layer.activation = "relu"
        return layer
    s_f = float(consumer.s_f) if scale is None else float(scale)
    factor = (consumer.n_f - 1) / s_f
    if factor != 1.0:
        layer.tables = layer.tables * factor
        layer.bias = layer.bias * factor
    layer.activation = "clip_round"
    layer.clip_max = consumer.n_f - 1
    layer.fused.append("scaling")
    return layer


def convert_lookup(name: str, layer: LookupConv2d, bn: BatchNorm2d, consumer: LookupConv2d | None,
                   scale: float | None = None) -> ReparamLayer:
    """All three fusions, in order."""
    rl = ReparamLayer.from_lookup(name, layer)
    fuse_rescale(rl)
    fuse_batchnorm(rl, bn)
    fuse_scaling(rl, consumer, scale)
    return rl


@dataclass
class ReparamBlock:
    """Residual block in index form: ``conv2`` adds the (integer) skip before its activation."""

    name: str
    conv1: ReparamLayer
    conv2: ReparamLayer
    stride: int
    out_channels: int

    def forward(self, x_idx, counter=None):
        h = self.conv1.forward(x_idx, counter=counter)
        skip = x_idx
        if self.stride > 1:
            skip = skip[:, :, ::self.stride, ::self.stride]
        extra = self.out_channels - skip.shape[1]
        if extra > 0:
            skip = np.concatenate([skip, np.zeros((skip.shape[0], extra) + skip.shape[2:], dtype=skip.dtype)], axis=1)
        return self.conv2.forward(h, skip=skip, counter=counter)


def fuse_residual(name: str, block: BasicBlock, next_layer: LookupConv2d | None) -> ReparamBlock:
    """Convert one residual block.

    The skip arrives as the integer indices of the block input; the trained
    skip was quantised and multiplied by ``s_next / s_in``, so in the index
    domain of the consumer it is exactly those integers.  For the last block
    (no lookup consumer) the output stays in units of ``s_in / (N - 1)``.
    """
    c1, c2 = block.conv1, block.conv2
    if not (isinstance(c1, LookupConv2d) and isinstance(c2, LookupConv2d)):
        raise ConversionError(f"{name}: residual block without lookup layers is not supported")
    s_in = float(c1.s_f)
    s_next = float(next_layer.s_f) if next_layer is not None else s_in
    if next_layer is not None and next_layer.n_f != c1.n_f:
        raise ConversionError(f"{name}: skip granularity {c1.n_f} differs from consumer {next_layer.n_f}")
    if not block.residual_scale and s_next != s_in:
        raise ConversionError(
            f"{name}: skip factor s_next/s_in = {s_next / s_in:.6g} != 1 but the block was trained "
            "without the residual-scale flag"
        )
    conv1 = convert_lookup(f"{name}.conv1", c1, block.bn1, c2)
    if next_layer is not None:
        conv2 = convert_lookup(f"{name}.conv2", c2, block.bn2, next_layer)
    else:
        conv2 = convert_lookup(f"{name}.conv2", c2, block.bn2, c1, scale=s_in)
        conv2.activation, conv2.clip_max = "relu", 0
    conv2.fused.append("residual")
    return ReparamBlock(name, conv1, conv2, block.stride, block.out_channels)


# ---------------------------------------------------------------------------
# the converted network

class ReparamNetwork:
    """Preserved stem -> index boundary -> converted body -> preserved head."""

    converted = True

    def __init__(self, stem: dict, boundary: dict, body: list, head: dict, family: str, spec: dict):
        self.stem, self.boundary, self.body, self.head = stem, boundary, body, head
        self.family, self.spec = family, spec

    def layers(self) -> list[ReparamLayer]:
        out = []
        for item in self.body:
            if isinstance(item, ReparamBlock):
                out += [item.conv1, item.conv2]
            else:
                out.append(item["layer"])
        return out

    def _stem_forward(self, x, counter):
        s = self.stem
        if x.ndim == 2:
            x = x.reshape(x.shape[0], x.shape[1], 1, 1)
        with no_grad():
            t = Tensor(x, dtype=s["weight"].dtype)
            y = F.conv2d(t, Tensor(s["weight"]), Tensor(s["bias"]), 1, s["padding"])
            y = F.batch_norm2d(y, Tensor(s["gamma"]), Tensor(s["beta"]), s["running_mean"].copy(),
                               s["running_var"].copy(), s["eps"], training=False)
            y = y.relu()
        k = s["weight"].shape[2]
        macs = y.data.size * s["weight"].shape[1] * k * k
        _count(counter, "preserved", "mul", macs + y.data.size, "stem")
        _count(counter, "preserved", "add", macs + y.data.size, "stem")
        return y.data

    def forward(self, x: np.ndarray, counter: OpCounter | None = None) -> np.ndarray:
        y = self._stem_forward(np.asarray(x), counter)
        idx = compute_indices(y, self.boundary["s_f"], "feature", self.boundary["n_f"])
        _count(counter, "boundary", "mul", y.size, "boundary")
        _count(counter, "boundary", "round", y.size, "boundary")
        h = idx
        for item in self.body:
            if isinstance(item, ReparamBlock):
                h = item.forward(h, counter)
            else:
                h = item["layer"].forward(h, counter=counter)
                if item["pool"]:
                    n, c, hh, ww = h.shape
                    h = h[:, :, :hh // 2 * 2, :ww // 2 * 2].reshape(n, c, hh // 2, 2, ww // 2, 2).max(axis=(3, 5))
                    _count(counter, "converted", "max", h.size * 3, item["layer"].name)
        hd = self.head
        if hd["pool"] == "flatten":
            feats = h.reshape(h.shape[0], -1)
        else:
            feats = h.sum(axis=(2, 3)) if hd["pool"] == "sum" else h.mean(axis=(2, 3))
            _count(counter, "preserved", "add", h.size, "head")
        w = hd["weight"].astype(np.float64)
        _count(counter, "preserved", "mul", feats.shape[0] * w.size, "head")
        _count(counter, "preserved", "add", feats.shape[0] * w.size, "head")
        return (feats.astype(np.float64) @ w.T + hd["bias"]).astype(np.float32)

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        return self.forward(x).argmax(axis=1)


def _stem_dict(stem) -> dict:
    return dict(weight=stem.conv.weight.data.copy(), bias=stem.conv.bias.data.copy(), padding=stem.conv.padding,
                gamma=stem.bn.gamma.data.copy(), beta=stem.bn.beta.data.copy(),
                running_mean=stem.bn.running_mean.copy(), running_var=stem.bn.running_var.copy(), eps=stem.bn.eps)


def convert_network(net) -> ReparamNetwork:
    """Fold re-scaling, batch norm and scaling into the tables of every lookup layer."""
    if getattr(net, "converted", False):
        raise ConversionError("network is already converted")
    if not isinstance(net, (LookupCNN, LookupResNet)):
        raise ConversionError(f"unsupported network type {type(net).__name__}")
    spec = net.spec.to_dict()
    if hasattr(net.stem.conv, "last_input_shape"):
        spec["input_shape"] = list(net.stem.conv.last_input_shape[1:])
    stem = _stem_dict(net.stem)
    head_w = net.head.fc.weight.data.astype(np.float64).copy()
    head_b = net.head.fc.bias.data.astype(np.float64).copy()
    body: list = []
    if isinstance(net, LookupResNet):
        blocks = net.blocks
        if not blocks:
            raise ConversionError("network has no residual blocks")
        first = blocks[0].conv1
        if not isinstance(first, LookupConv2d):
            raise ConversionError("blocks.0.conv1: not a lookup layer")
        for i, block in enumerate(blocks):
            nxt = blocks[i + 1].conv1 if i + 1 < len(blocks) else None
            body.append(fuse_residual(f"blocks.{i}", block, nxt))
        last = blocks[-1].conv1
        last_out = blocks[-1].conv2
        hw = int(np.prod(last_out.last_output_shape[2:])) if hasattr(last_out, "last_output_shape") else None
        if hw is None:
            raise ConversionError("run one forward pass before converting (head input size unknown)")
        # output leaves the body in units of s_in / (N - 1); the head absorbs that and the 1/HW
        head_w = head_w * (float(last.s_f) / (last.n_f - 1) / hw)
        head = dict(weight=head_w.astype(np.float32), bias=head_b.astype(np.float32), pool="sum")
        family = "resnet"
    else:
        units: list[Unit] = net.units
        if not units:
            raise ConversionError("network has no lookup units")
        for i, unit in enumerate(units):
            if not isinstance(unit.layer, LookupConv2d):
                raise ConversionError(f"units.{i}.layer: {type(unit.layer).__name__} is not a lookup layer")
            consumer = units[i + 1].layer if i + 1 < len(units) else None
            body.append(dict(layer=convert_lookup(f"units.{i}.layer", unit.layer, unit.bn, consumer),
                             pool=unit.pool is not None))
        first = units[0].layer
        head = dict(weight=head_w.astype(np.float32), bias=head_b.astype(np.float32), pool=net.head.pool)
        family = net.family
    boundary = dict(s_f=float(first.s_f), n_f=first.n_f)
    rnet = ReparamNetwork(stem, boundary, body, head, family, spec)
    for layer in rnet.layers():
        layer.finalize()
    return rnet


# ---------------------------------------------------------------------------
# checks and reports

def training_eval_forward(net: Module, x: np.ndarray) -> np.ndarray:
    net.eval()
    with no_grad():
        return net(Tensor(np.asarray(x, dtype=np.float32))).data


def capture_lookup_indices(net: Module, x: np.ndarray) -> "OrderedDict[str, np.ndarray]":
    """Feature indices seen by every lookup layer during an eval forward."""
    captured: "OrderedDict[str, np.ndarray]" = OrderedDict()
    patched = []
    for name, m in net.named_modules():
        if isinstance(m, LookupConv2d):
            original = m.forward

            def hook(inp, _m=m, _name=name, _orig=original):
                captured[_name] = _m.feature_indices(inp.data)
                return _orig(inp)

            m.forward = hook
            patched.append(m)
    try:
        training_eval_forward(net, x)
    finally:
        for m in patched:
            del m.forward
    return captured


def converted_indices(rnet: ReparamNetwork, x: np.ndarray) -> "OrderedDict[str, np.ndarray]":
    """Index maps entering every converted layer (same naming as the training network)."""
    captured: "OrderedDict[str, np.ndarray]" = OrderedDict()
    patched = []
    for layer in rnet.layers():
        original = layer.forward

        def hook(inp, *args, _layer=layer, _orig=original, **kwargs):
            captured[_layer.name] = np.asarray(inp)
            return _orig(inp, *args, **kwargs)

        layer.forward = hook
        patched.append(layer)
    try:
        rnet.forward(x)
    finally:
        for layer in patched:
            del layer.forward
    return captured


def equivalence_report(net: Module, rnet: ReparamNetwork, x: np.ndarray) -> dict:
    ref = training_eval_forward(net, x)
    out = rnet.forward(x)
    ref_idx = capture_lookup_indices(net, x)
    new_idx = converted_indices(rnet, x)
    mismatched = sum(int((ref_idx[k] != new_idx[k]).sum()) for k in ref_idx if k in new_idx)
    total = sum(v.size for v in ref_idx.values())
    return dict(max_abs_diff=float(np.abs(ref.astype(np.float64) - out).max()),
                argmax_agreement=float((ref.argmax(1) == out.argmax(1)).mean()),
                index_mismatches=mismatched, index_total=total)


def conversion_report(rnet: ReparamNetwork, input_shape, training_bytes_per_entry: int = 2) -> dict:
    """Per-layer table memory (shared training table vs fused per-channel tables) and op counts."""
    counter = OpCounter()
    rnet.forward(np.zeros((1,) + tuple(input_shape), dtype=np.float32), counter)
    rows = []
    for layer in rnet.layers():
        ops = counter.per_layer.get(layer.name, Counter())
        rows.append(dict(
            layer=layer.name, out_channels=layer.out_channels, n_f=layer.n_f, n_w=layer.n_w,
            shared_table_bytes=layer.n_f * layer.n_w * training_bytes_per_entry,
            fused_table_bytes=int(layer.tables.nbytes), index_bytes=int(layer.idx_w.nbytes),
            lookups=ops["lookup"], adds=ops["add"], muls=ops["mul"],
        ))
    return dict(
        layers=rows,
        shared_table_bytes=sum(r["shared_table_bytes"] for r in rows),
        fused_table_bytes=sum(r["fused_table_bytes"] for r in rows),
        ops=counter.as_dict(),
        converted_muls=counter.total("mul", "converted"),
    )


__all__ = [
    "ConversionError",
    "OpCounter",
    "ReparamBlock",
    "ReparamLayer",
    "ReparamNetwork",
    "capture_lookup_indices",
    "conversion_report",
    "convert_lookup",
    "convert_network",
    "converted_indices",
    "equivalence_report",
    "fuse_batchnorm",
    "fuse_rescale",
    "fuse_residual",
    "fuse_scaling",
    "training_eval_forward",
]
