"""Run configuration (YAML or JSON) and the ablation presets."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .data import Dataset, cifar10_dataset, cifar10_dir, gaussian_classes, synthetic_images
from .models import NetworkSpec, build_network, parse_arch
from .table import TABLE_MODES
from .train import TrainConfig

DATA_SOURCES = ("cifar10-binary", "synthetic-images", "synthetic-gaussian-classes")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    arch: str = "desk-cnn-lookup"
    data_source: str = "cifar10-binary"
    data_path: str | None = None
    train_size: int = 5000
    test_size: int = 1000
    num_classes: int = 10
    n_f: int = 33
    n_w: int = 33
    table_mode: str = "cumulative"
    grad_rescale: bool = True
    exponential_scales: bool = True
    ste: str = "product"
    residual_scale: bool = True
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.1
    milestones: list[float] = field(default_factory=lambda: [0.4, 0.8])
    momentum: float = 0.9
    weight_decay: float = 5e-4
    clip_norm: float = 3.0
    augment: bool = True
    seed: int = 0

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        text = Path(path).read_text()
        values = yaml.safe_load(text) or {}
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: expected a mapping at the top level")
        return cls.from_dict(values)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    def validate(self) -> None:
        parse_arch(self.arch)
        if self.data_source not in DATA_SOURCES:
            raise ConfigError(f"data_source must be one of {DATA_SOURCES}, got {self.data_source!r}")
        if self.table_mode not in TABLE_MODES:
            raise ConfigError(f"table_mode must be one of {TABLE_MODES}, got {self.table_mode!r}")
        if self.n_w % 2 == 0 or self.n_w < 3:
            raise ConfigError(f"n_w must be odd and >= 3, got {self.n_w}")
        if self.n_f < 2:
            raise ConfigError(f"n_f must be >= 2, got {self.n_f}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def network_spec(self, in_channels: int) -> NetworkSpec:
        return NetworkSpec(arch=self.arch, in_channels=in_channels, num_classes=self.num_classes, n_f=self.n_f,
                           n_w=self.n_w, table_mode=self.table_mode, grad_rescale=self.grad_rescale,
                           exponential_scales=self.exponential_scales, ste=self.ste,
                           residual_scale=self.residual_scale, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
                           weight_decay=self.weight_decay, clip_norm=self.clip_norm,
                           milestones=tuple(self.milestones), augment=self.augment, seed=self.seed)

    def load_data(self) -> Dataset:
        if self.data_source == "cifar10-binary":
            root = self.data_path or cifar10_dir()
            if root is None:
                raise FileNotFoundError("CIFAR-10 directory not configured (data_path or LOOKUPNET_CIFAR10_DIR)")
            return cifar10_dataset(root, self.train_size, self.test_size, seed=0)
        if self.data_source == "synthetic-images":
            return synthetic_images(self.train_size, self.test_size, self.num_classes, seed=0)
        return gaussian_classes(self.train_size, self.test_size, classes=self.num_classes, seed=0)

    def build(self, data: Dataset):
        shape = data.x_train.shape[1:]
        return build_network(self.network_spec(shape[0]), input_shape=tuple(shape))


# ablation rows: table construction, granularity and the two training strategies
ABLATIONS: dict[str, dict] = {
    "ours": dict(table_mode="cumulative", n_f=33, n_w=33, exponential_scales=True, grad_rescale=True),
    "model1": dict(table_mode="fixed", n_f=33, n_w=33, exponential_scales=True, grad_rescale=False),
    "model2": dict(table_mode="independent-random", n_f=33, n_w=33, exponential_scales=True, grad_rescale=True),
    "model3": dict(table_mode="independent-step", n_f=33, n_w=33, exponential_scales=True, grad_rescale=True),
    "model4": dict(table_mode="cumulative", n_f=17, n_w=17, exponential_scales=True, grad_rescale=True),
    "model5": dict(table_mode="cumulative", n_f=65, n_w=65, exponential_scales=True, grad_rescale=True),
    "model6": dict(table_mode="cumulative", n_f=33, n_w=33, exponential_scales=False, grad_rescale=False),
    "model7": dict(table_mode="cumulative", n_f=33, n_w=33, exponential_scales=True, grad_rescale=False),
}


def ablation_config(name: str, **overrides) -> RunConfig:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; expected one of {sorted(ABLATIONS)}")
    return RunConfig.from_dict({**ABLATIONS[name], **overrides})


__all__ = ["ABLATIONS", "ConfigError", "DATA_SOURCES", "RunConfig", "ablation_config"]
