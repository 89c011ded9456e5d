"""Network architectures with lookup layers or plain convolutions.

All networks share one layout: a full-precision ``stem`` (conv, BN, ReLU),
a body of lookup (or conv) units, and a full-precision ``head``.  The first
and last layers are never lookup layers.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from . import functional as F
from .layer import LookupConv2d, scaled_skip
from .nn import BatchNorm2d, Conv2d, Linear, MaxPool2d, Module
from .tensor import Tensor


@dataclass
class NetworkSpec:
    """Everything needed to rebuild a network (stored in checkpoint headers)."""

    arch: str = "desk-cnn"
    layer_kind: str = "lookup"
    in_channels: int = 3
    num_classes: int = 10
    n_f: int = 33
    n_w: int = 33
    table_mode: str = "cumulative"
    grad_rescale: bool = True
    exponential_scales: bool = True
    ste: str = "product"
    residual_scale: bool = True
    seed: int = 0
    widths: list[int] = field(default_factory=list)
    blocks: list[int] = field(default_factory=list)
    pools: list[bool] = field(default_factory=list)
    strides: list[int] = field(default_factory=list)
    stem_width: int = 0
    head: str = "avg"

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


# base architectures; widths/strides/pools describe the lookup body
ARCHITECTURES: dict[str, dict[str, Any]] = {
    "resnet20": dict(family="resnet", stem_width=16, widths=[16, 32, 64], blocks=[3, 3, 3]),
    "toy-resnet": dict(family="resnet", stem_width=8, widths=[8, 8], blocks=[1, 1]),
    "vggsmall": dict(family="cnn", stem_width=128, widths=[128, 256, 256, 512, 512],
                     strides=[1, 1, 1, 1, 1], pools=[True, False, True, False, True], head="flatten"),
    "desk-cnn": dict(family="cnn", stem_width=16, widths=[32, 32, 64, 64],
                     strides=[2, 1, 2, 1], pools=[False, False, False, False], head="avg"),
    "toy-cnn": dict(family="cnn", stem_width=8, widths=[8, 8], strides=[1, 1], pools=[False, False], head="avg"),
    "toy-mlp": dict(family="mlp", stem_width=32, widths=[32, 32], head="avg"),
}


def parse_arch(name: str) -> tuple[str, str]:
    """``"resnet20-lookup"`` -> ``("resnet20", "lookup")``; a bare name means lookup."""
    for kind in ("lookup", "conv"):
        if name.endswith("-" + kind):
            base = name[: -len(kind) - 1]
            break
    else:
        base, kind = name, "lookup"
    if base not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {name!r}; known: {sorted(ARCHITECTURES)}")
    return base, kind


def _make_layer(spec: NetworkSpec, rng, cin, cout, k, stride, padding):
    if spec.layer_kind == "conv":
        return Conv2d(cin, cout, k, stride, padding, rng=rng)
    if spec.layer_kind != "lookup":
        raise ValueError(f"layer_kind must be 'lookup' or 'conv', got {spec.layer_kind!r}")
    return LookupConv2d(cin, cout, k, stride, padding, n_f=spec.n_f, n_w=spec.n_w, table_mode=spec.table_mode,
                        grad_rescale=spec.grad_rescale, exponential_scales=spec.exponential_scales,
                        ste=spec.ste, rng=rng)


class Stem(Module):
    """Full-precision conv + BN + ReLU; ``kernel=1`` for vector inputs."""

    def __init__(self, cin: int, cout: int, kernel: int, rng):
        super().__init__()
        self.conv = Conv2d(cin, cout, kernel, 1, kernel // 2, rng=rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return self.bn(self.conv(x)).relu()


class Head(Module):
    def __init__(self, features: int, classes: int, pool: str, rng):
        super().__init__()
        self.pool = pool
        self.fc = Linear(features, classes, rng=rng)

    def forward(self, x):
        x = F.global_avg_pool(x) if self.pool == "avg" else F.flatten(x)
        return self.fc(x)


class Unit(Module):
    """Lookup (or conv) layer -> BN -> ReLU -> optional 2x2 max pool."""

    def __init__(self, layer, channels: int, pool: bool):
        super().__init__()
        self.layer = layer
        self.bn = BatchNorm2d(channels)
        self.pool = MaxPool2d(2) if pool else None

    def forward(self, x):
        x = self.bn(self.layer(x)).relu()
        return self.pool(x) if self.pool is not None else x


def option_a_shortcut(x: Tensor, out_channels: int, stride: int) -> Tensor:
    """Parameter-free shortcut: subsample spatially and zero-pad new channels."""
    if stride > 1:
        x = x[:, :, ::stride, ::stride]
    extra = out_channels - x.shape[1]
    if extra > 0:
        zeros = Tensor(np.zeros((x.shape[0], extra) + x.shape[2:], dtype=x.dtype))
        from .tensor import concatenate
        x = concatenate([x, zeros], axis=1)
    return x


class BasicBlock(Module):
    """Two 3x3 layers with BN and an identity / option-A shortcut.

    For lookup layers with ``residual_scale`` the skip carries the input
    quantised at ``conv1``'s feature scale and multiplied by
    ``s_next / s_in`` (``s_next``: the feature scale of whatever consumes
    the block output).  The re-parameterised network then adds integer
    indices on the skip without any multiplication.
    """

    def __init__(self, spec: NetworkSpec, cin: int, cout: int, stride: int, rng):
        super().__init__()
        self.in_channels, self.out_channels, self.stride = cin, cout, stride
        self.conv1 = _make_layer(spec, rng, cin, cout, 3, stride, 1)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = _make_layer(spec, rng, cout, cout, 3, 1, 1)
        self.bn2 = BatchNorm2d(cout)
        self.residual_scale = spec.residual_scale and spec.layer_kind == "lookup"

    def forward(self, x, next_layer: LookupConv2d | None = None):
        h = self.bn1(self.conv1(x)).relu()
        h = self.bn2(self.conv2(h))
        skip = x
        if self.residual_scale:
            if self.training and not self.conv1._buffers["scales_initialized"]:
                raise RuntimeError("conv1 scales must be initialised before the skip path")
            out_scale = next_layer.scales if next_layer is not None else None
            skip = scaled_skip(x, self.conv1.scales, out_scale, self.conv1.n_f)
        skip = option_a_shortcut(skip, self.out_channels, self.stride)
        return (h + skip).relu()


class LookupResNet(Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        self.stem = Stem(spec.in_channels, spec.stem_width, 3, rng)
        blocks = []
        cin = spec.stem_width
        for stage, (width, count) in enumerate(zip(spec.widths, spec.blocks)):
            for b in range(count):
                stride = 2 if (stage > 0 and b == 0) else 1
                blocks.append(BasicBlock(spec, cin, width, stride, rng))
                cin = width
        self.blocks = blocks
        self.head = Head(cin, spec.num_classes, "avg", rng)

    def forward(self, x):
        x = self.stem(x)
        for i, block in enumerate(self.blocks):
            nxt = self.blocks[i + 1].conv1 if i + 1 < len(self.blocks) else None
            x = block(x, nxt if isinstance(nxt, LookupConv2d) else None)
        return self.head(x)


class LookupCNN(Module):
    """Plain feed-forward stack (VGG-style, desk CNN, and the MLP on 1x1 'images')."""

    def __init__(self, spec: NetworkSpec, family: str = "cnn"):
        super().__init__()
        self.spec = spec
        self.family = family
        rng = np.random.default_rng(spec.seed)
        k = 1 if family == "mlp" else 3
        self.stem = Stem(spec.in_channels, spec.stem_width, k, rng)
        units = []
        cin = spec.stem_width
        strides = spec.strides or [1] * len(spec.widths)
        pools = spec.pools or [False] * len(spec.widths)
        for width, stride, pool in zip(spec.widths, strides, pools):
            units.append(Unit(_make_layer(spec, rng, cin, width, k, stride, k // 2), width, pool))
            cin = width
        self.units = units
        self.head_features = cin
        self.head = None
        self._rng = rng

    def _ensure_head(self, x_shape):
        if self.head is None:
            features = self.head_features
            if self.spec.head == "flatten":
                features *= int(np.prod(x_shape[2:]))
            self.head = Head(features, self.spec.num_classes, self.spec.head, self._rng)

    def forward(self, x):
        if x.ndim == 2:
            x = x.reshape(x.shape[0], x.shape[1], 1, 1)
        x = self.stem(x)
        for unit in self.units:
            x = unit(x)
        self._ensure_head(x.shape)
        return self.head(x)


def build_network(spec: NetworkSpec | None = None, input_shape: tuple[int, ...] | None = None, **overrides) -> Module:
    """Instantiate an architecture.

    ``spec.arch`` names a base architecture from :data:`ARCHITECTURES`;
    fields left empty in ``spec`` are filled from that template.  For
    flatten heads ``input_shape`` (C, H, W) fixes the head size up front.
    """
    spec = NetworkSpec(**{**(spec.to_dict() if spec else {}), **overrides})
    base, kind = parse_arch(spec.arch)
    template = ARCHITECTURES[base]
    if spec.arch != base:
        spec.arch, spec.layer_kind = base, kind
    for key in ("widths", "blocks", "pools", "strides"):
        if not getattr(spec, key) and key in template:
            setattr(spec, key, list(template[key]))
    if not spec.stem_width:
        spec.stem_width = template["stem_width"]
    if "head" in template and spec.head == "avg":
        spec.head = template["head"]
    family = template["family"]
    if family == "resnet":
        net = LookupResNet(spec)
    else:
        net = LookupCNN(spec, family)
        if input_shape is not None or family == "mlp":
            shape = input_shape or (spec.in_channels, 1, 1)
            net._ensure_head(_body_output_shape(net, shape))
    return net


def _body_output_shape(net: LookupCNN, shape):
    c, h, w = (shape + (1, 1))[:3] if len(shape) == 1 else shape
    for unit in net.units:
        layer = unit.layer
        k, s, p = layer.kernel_size, layer.stride, layer.padding
        h = F.conv_output_size(h, k, s, p)
        w = F.conv_output_size(w, k, s, p)
        if unit.pool is not None:
            h, w = h // 2, w // 2
        c = layer.out_channels
    return (1, c, h, w)


def lookup_layers(net: Module) -> list[tuple[str, LookupConv2d]]:
    return [(name, m) for name, m in net.named_modules() if isinstance(m, LookupConv2d)]


def reset_cell_counts(net: Module) -> None:
    for _, layer in lookup_layers(net):
        layer.table.reset_counts()
