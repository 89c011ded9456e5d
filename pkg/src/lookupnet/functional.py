"""Differentiable building blocks: convolution, batch norm, pooling, losses."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, make_node

BN_EPS = 1e-5


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    out = (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1
    if out < 1:
        raise ValueError(
            f"geometry yields empty output: size={size}, kernel={kernel}, "
            f"stride={stride}, padding={padding}, dilation={dilation}"
        )
    return out


def im2col(x: np.ndarray, kernel: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> np.ndarray:
    """Gather receptive-field patches.

    Returns an array of shape ``(N * H_out * W_out, C * kernel * kernel)``;
    columns are ordered (channel, kernel row, kernel column) so they line up
    with ``weight.reshape(C_out, -1)``.
    """
    n, c, h, w = x.shape
    ho = conv_output_size(h, kernel, stride, padding, dilation)
    wo = conv_output_size(w, kernel, stride, padding, dilation)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, kernel, kernel, ho, wo), dtype=x.dtype)
    for i in range(kernel):
        r0 = i * dilation
        for j in range(kernel):
            c0 = j * dilation
            cols[:, :, i, j] = x[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * kernel * kernel)


def col2im(cols: np.ndarray, input_shape, kernel: int, stride: int = 1, padding: int = 0,
           dilation: int = 1) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patch values back to the image."""
    n, c, h, w = input_shape
    ho = conv_output_size(h, kernel, stride, padding, dilation)
    wo = conv_output_size(w, kernel, stride, padding, dilation)
    cols = cols.reshape(n, ho, wo, c, kernel, kernel).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kernel):
        r0 = i * dilation
        for j in range(kernel):
            c0 = j * dilation
            img[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride] += cols[:, :, i, j]
    if padding:
        img = img[:, :, padding:padding + h, padding:padding + w]
    return img


def _check_conv_shapes(x: Tensor, weight: Tensor, bias) -> None:
    if x.ndim != 4:
        raise ValueError(f"expected NCHW input, got shape {x.shape}")
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ValueError(f"expected square C_out x C_in x k x k kernel, got {weight.shape}")
    if weight.shape[1] != x.shape[1]:
        raise ValueError(f"kernel expects {weight.shape[1]} input channels, input has {x.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match {weight.shape[0]} output channels")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0,
           dilation: int = 1) -> Tensor:
    """Cross-correlation through im2col + matmul."""
    _check_conv_shapes(x, weight, bias)
    n, c, h, w = x.shape
    cout, _, k, _ = weight.shape
    ho = conv_output_size(h, k, stride, padding, dilation)
    wo = conv_output_size(w, k, stride, padding, dilation)
    cols = im2col(x.data, k, stride, padding, dilation)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def grad_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gx = col2im(gmat @ wmat, x.shape, k, stride, padding, dilation)
        gb = gmat.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(np.ascontiguousarray(out), parents, grad_fn, "conv2d")


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
                 eps: float = BN_EPS, training: bool = False, momentum: float = 0.1) -> Tensor:
    """Per-channel batch normalisation over (N, H, W).

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, exponential moving average).
    """
    if x.ndim != 4:
        raise ValueError(f"expected NCHW input, got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ValueError(f"batch norm parameters do not match {c} channels")
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.data.size // c
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu = running_mean
        var = running_var
    denom = var + eps
    if np.any(denom <= 0):
        raise ValueError("batch norm variance + eps must be positive")
    sigma = np.sqrt(denom).astype(x.dtype)
    xhat = (x.data - mu.reshape(1, c, 1, 1).astype(x.dtype)) / sigma.reshape(1, c, 1, 1)
    out = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    def grad_fn(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(1, c, 1, 1)
        if training:
            gx = (gxhat - gxhat.mean(axis=axes, keepdims=True)
                  - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)) / sigma.reshape(1, c, 1, 1)
        else:
            gx = gxhat / sigma.reshape(1, c, 1, 1)
        return gx, ggamma, gbeta

    return make_node(out.astype(x.dtype, copy=False), (x, gamma, beta), grad_fn, "batch_norm2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        return g @ weight.data, g.T @ x.data, (g.sum(axis=0) if bias is not None else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out, parents, grad_fn, "linear")


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    stride = stride or kernel
    n, c, h, w = x.shape
    ho = conv_output_size(h, kernel, stride)
    wo = conv_output_size(w, kernel, stride)
    cols = im2col(x.data.reshape(n * c, 1, h, w), kernel, stride)
    arg = cols.argmax(axis=1)
    out = cols[np.arange(cols.shape[0]), arg].reshape(n, c, ho, wo)

    def grad_fn(g):
        gcols = np.zeros_like(cols)
        gcols[np.arange(cols.shape[0]), arg] = g.reshape(-1)
        return (col2im(gcols, (n * c, 1, h, w), kernel, stride).reshape(x.shape),)

    return make_node(out, (x,), grad_fn, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    scale = 1.0 / (h * w)
    out = x.data.mean(axis=(2, 3))
    return make_node(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] * scale, x.shape),), "avg_pool")


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy for integer class labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy got logits {logits.shape} and labels {labels.shape}")
    n = logits.shape[0]
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def grad_fn(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return make_node(np.asarray(loss, dtype=logits.dtype), (logits,), grad_fn, "cross_entropy")


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(np.asarray(logits)))


__all__ = [
    "BN_EPS",
    "as_tensor",
    "batch_norm2d",
    "col2im",
    "conv2d",
    "conv_output_size",
    "cross_entropy",
    "flatten",
    "global_avg_pool",
    "im2col",
    "linear",
    "log_softmax",
    "max_pool2d",
    "softmax",
]
