"""Central finite-difference checks of analytical gradients."""
from __future__ import annotations

import copy

import numpy as np

from .functional import cross_entropy
from .models import lookup_layers
from .tensor import Tensor, default_dtype


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def numeric_grad(loss_fn, param, eps: float = 1e-6, coords=None) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. ``param.data`` (all or selected flat coordinates)."""
    flat = param.data.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    grad = np.zeros(flat.size)
    for i in coords:
        old = flat[i]
        flat[i] = old + eps
        up = float(loss_fn())
        flat[i] = old - eps
        down = float(loss_fn())
        flat[i] = old
        grad[i] = (up - down) / (2 * eps)
    return grad.reshape(param.shape)


def check_param_grads(loss_fn, params: dict, eps: float = 1e-6) -> dict[str, float]:
    """Relative error per named parameter; ``loss_fn`` must build a fresh graph on every call."""
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    out = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros(p.shape)
        out[name] = relative_error(analytic, numeric_grad(lambda: loss_fn().data, p, eps))
    return out


def network_check(net, x: np.ndarray, y: np.ndarray, eps: float = 1e-6) -> dict[str, float]:
    """64-bit check of the gradients that sit downstream of every quantiser.

    Covers the table parameters of the last lookup layer and the head; their
    perturbation cannot move any rounding decision, so the loss is smooth in
    them.
    """
    with default_dtype(np.float64):
        model = copy.deepcopy(net).astype(np.float64)
        model.train()
        params = {}
        layers = lookup_layers(model)
        if layers:
            name, layer = layers[-1]
            for pname, p in layer.table.named_parameters():
                params[f"{name}.table.{pname}"] = p
        for pname, p in model.head.named_parameters():
            params[f"head.{pname}"] = p
        xt = np.asarray(x, dtype=np.float64)
        model(Tensor(xt))  # initialises scales
        model.eval()  # frozen BN statistics and no gradient re-scaling: the loss is a plain function
        return check_param_grads(lambda: cross_entropy(model(Tensor(xt)), y), params, eps)


__all__ = ["check_param_grads", "network_check", "numeric_grad", "relative_error"]
