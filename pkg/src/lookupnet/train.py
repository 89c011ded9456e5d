"""SGD training loop with global-norm clipping and a step learning-rate schedule."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, augment as augment_batch, batches
from .functional import cross_entropy
from .models import lookup_layers, reset_cell_counts
from .nn import Module, Parameter
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

NO_DECAY_ROLES = ("table", "scale")


class TrainingDiverged(FloatingPointError):
    """Loss or a parameter became non-finite."""


class SGD:
    """Heavy-ball SGD: ``v = m v + (g + wd p)``, ``p -= lr v``.

    Parameters whose role is in ``no_decay`` are updated without weight decay.
    """

    def __init__(self, params: list[Parameter], lr: float = 0.1, momentum: float = 0.9,
                 weight_decay: float = 5e-4, no_decay=NO_DECAY_ROLES):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.no_decay = tuple(no_decay)
        self.buffers = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, buf in zip(self.params, self.buffers):
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=True)
            if self.weight_decay and getattr(p, "role", "weight") not in self.no_decay:
                g += self.weight_decay * p.data
            buf *= self.momentum
            buf += g
            p.data = p.data - self.lr * buf

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def global_grad_norm(params) -> float:
    return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))


def clip_grad_norm(params, max_norm: float = 3.0) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``; returns the norm before clipping."""
    norm = global_grad_norm(params)
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


def step_lr(epoch: int, epochs: int, base_lr: float, milestones=(0.4, 0.8), factor: float = 0.1) -> float:
    """Learning rate for ``epoch`` (0-based): decayed by ``factor`` at each milestone fraction."""
    drops = sum(epoch >= max(1, int(round(m * epochs))) for m in milestones)
    return base_lr * factor ** drops


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    clip_norm: float = 3.0
    milestones: tuple = (0.4, 0.8)
    augment: bool = True
    seed: int = 0
    eval_batch_size: int = 500


@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    scale_history: list[dict] = field(default_factory=list)
    step: int = 0


def scale_snapshot(net: Module) -> dict:
    out = {}
    for name, layer in lookup_layers(net):
        out[f"{name}.s_w"] = float(layer.s_w)
        out[f"{name}.s_f"] = float(layer.s_f)
    return out


def check_scales(net: Module, step: int) -> None:
    """With exponential scales both scales must stay strictly positive."""
    for name, layer in lookup_layers(net):
        if layer.scales.exponential and not (layer.s_w > 0 and layer.s_f > 0):
            raise AssertionError(f"step {step}: non-positive scale in {name} (s_w={layer.s_w}, s_f={layer.s_f})")


def evaluate(net: Module, x: np.ndarray, y: np.ndarray, batch_size: int = 500) -> tuple[float, float]:
    """(mean loss, accuracy) in eval mode."""
    net.eval()
    if len(y) == 0:
        return float("nan"), float("nan")
    total_loss, correct = 0.0, 0
    with no_grad():
        for idx in batches(len(y), batch_size):
            logits = net(Tensor(x[idx]))
            total_loss += float(cross_entropy(logits, y[idx]).data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
    return total_loss / len(y), correct / len(y)


def predict_logits(net: Module, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
    net.eval()
    outs = []
    with no_grad():
        for idx in batches(len(x), batch_size):
            outs.append(net(Tensor(x[idx])).data)
    return np.concatenate(outs) if outs else np.zeros((0, 0), dtype=np.float32)


def train(net: Module, data: Dataset, config: TrainConfig, on_epoch=None, start_step: int = 0) -> TrainResult:
    """Mini-batch training with the full recipe; returns per-epoch metrics and per-step scale history."""
    rng = np.random.default_rng(config.seed)
    params = net.parameters()
    opt = SGD(params, config.lr, config.momentum, config.weight_decay)
    result = TrainResult(step=start_step)
    image_like = data.x_train.ndim == 4
    for epoch in range(config.epochs):
        opt.lr = step_lr(epoch, config.epochs, config.lr, config.milestones)
        net.train()
        seen, loss_sum, correct = 0, 0.0, 0
        for idx in batches(len(data.y_train), config.batch_size, rng):
            xb = data.x_train[idx]
            if config.augment and image_like:
                xb = augment_batch(xb, rng)
            yb = data.y_train[idx]
            reset_cell_counts(net)
            logits = net(Tensor(xb))
            loss = cross_entropy(logits, yb)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch} step {result.step} (lr={opt.lr}); "
                    f"scales: {scale_snapshot(net)}"
                )
            opt.zero_grad()
            loss.backward()
            if config.clip_norm:
                clip_grad_norm(params, config.clip_norm)
            opt.step()
            result.step += 1
            check_scales(net, result.step)
            result.scale_history.append({"step": result.step, **scale_snapshot(net)})
            seen += len(idx)
            loss_sum += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == yb).sum())
        test_loss, test_acc = evaluate(net, data.x_test, data.y_test, config.eval_batch_size)
        row = {"epoch": epoch + 1, "step": result.step, "lr": opt.lr, "train_loss": loss_sum / max(seen, 1),
               "train_acc": correct / max(seen, 1), "test_loss": test_loss, "test_acc": test_acc,
               **scale_snapshot(net)}
        result.metrics.append(row)
        log.info("epoch %d loss %.4f train %.4f test %.4f", epoch + 1, row["train_loss"], row["train_acc"], test_acc)
        if on_epoch is not None:
            on_epoch(row)
    return result


__all__ = [
    "SGD",
    "TrainConfig",
    "TrainResult",
    "TrainingDiverged",
    "check_scales",
    "clip_grad_norm",
    "evaluate",
    "global_grad_norm",
    "predict_logits",
    "scale_snapshot",
    "step_lr",
    "train",
]
