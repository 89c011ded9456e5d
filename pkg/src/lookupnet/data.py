"""CIFAR-10 binary reader/writer, augmentation, and synthetic datasets."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILES = ["test_batch.bin"]
CIFAR_DIR_ENV = "LOOKUPNET_CIFAR10_DIR"


@dataclass
class DatasetSpec:
    source: str
    num_classes: int
    train_size: int
    test_size: int
    mean: list[float] = field(default_factory=list)
    std: list[float] = field(default_factory=list)


@dataclass
class Dataset:
    spec: DatasetSpec
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


def read_cifar10_file(path) -> tuple[np.ndarray, np.ndarray]:
    """One binary batch file -> (N x 3 x 32 x 32 float32 in [0, 1], N int64 labels)."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % RECORD_BYTES:
        complete = raw.size // RECORD_BYTES
        raise ValueError(
            f"{path}: truncated record {complete} at byte offset {complete * RECORD_BYTES} "
            f"({raw.size - complete * RECORD_BYTES} of {RECORD_BYTES} bytes present)"
        )
    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise ValueError(f"{path}: label {labels[bad]} out of range at byte offset {bad * RECORD_BYTES}")
    images = records[:, 1:].reshape(-1, *IMAGE_SHAPE).astype(np.float32) / np.float32(255.0)
    return images, labels


def write_cifar10_file(path, images: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of :func:`read_cifar10_file`; ``images`` may be uint8 or floats in [0, 1]."""
    images = np.asarray(images)
    if images.dtype != np.uint8:
        images = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    records = np.concatenate([labels, images.reshape(len(labels), -1)], axis=1)
    Path(path).write_bytes(records.tobytes())


def load_cifar10(path, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Load a batch file, or every file of ``split`` in a CIFAR-10 binary directory."""
    path = Path(path)
    if path.is_file():
        return read_cifar10_file(path)
    names = CIFAR_TRAIN_FILES if split == "train" else CIFAR_TEST_FILES
    for sub in (path, path / "cifar-10-batches-bin"):
        files = [sub / n for n in names]
        if all(f.is_file() for f in files):
            parts = [read_cifar10_file(f) for f in files]
            return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])
    raise FileNotFoundError(f"no CIFAR-10 {split} files under {path}")


def cifar10_dir() -> str | None:
    root = os.environ.get(CIFAR_DIR_ENV)
    return root if root and Path(root).exists() else None


def subset(x, y, n: int, seed: int = 0):
    """Fixed random subset of size ``n`` (whole set if ``n`` is 0 or too large)."""
    if not n or n >= len(y):
        return x, y
    order = np.random.default_rng(seed).permutation(len(y))[:n]
    return x[order], y[order]


def channel_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    axes = (0,) + tuple(range(2, x.ndim))
    return x.mean(axis=axes), x.std(axis=axes)


def normalize(x: np.ndarray, mean, std) -> np.ndarray:
    shape = (1, -1) + (1,) * (x.ndim - 2)
    return ((x - np.reshape(mean, shape)) / np.reshape(std, shape)).astype(np.float32)


def cifar10_dataset(root, train_size: int = 5000, test_size: int = 1000, seed: int = 0) -> Dataset:
    xtr, ytr = subset(*load_cifar10(root, "train"), train_size, seed)
    xte, yte = subset(*load_cifar10(root, "test"), test_size, seed)
    mean, std = channel_stats(xtr)
    spec = DatasetSpec("cifar10-binary", 10, len(ytr), len(yte), mean.tolist(), std.tolist())
    return Dataset(spec, normalize(xtr, mean, std), ytr, normalize(xte, mean, std), yte)


def augment(batch: np.ndarray, rng: np.random.Generator, pad: int = 4, flip: bool = True) -> np.ndarray:
    """Zero-pad, random crop back to the original size, random horizontal flip."""
    n, c, h, w = batch.shape
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    out = np.empty_like(batch)
    for i in range(n):
        crop = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def crop(batch: np.ndarray, dy: int, dx: int, pad: int = 4) -> np.ndarray:
    """Deterministic pad-and-crop at a fixed offset."""
    h, w = batch.shape[2:]
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return padded[:, :, dy:dy + h, dx:dx + w]


def hflip(batch: np.ndarray) -> np.ndarray:
    return batch[..., ::-1].copy()


def gaussian_classes(n_train: int = 400, n_test: int = 200, features: int = 2, classes: int = 2,
                     separation: float = 4.0, seed: int = 0) -> Dataset:
    """Isotropic Gaussian blobs; well separated by default."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(classes, features))
    centers *= separation / max(np.linalg.norm(centers[0] - centers[-1]), 1e-12)

    def draw(n):
        y = rng.integers(0, classes, size=n)
        return (centers[y] + rng.normal(size=(n, features))).astype(np.float32), y.astype(np.int64)

    xtr, ytr = draw(n_train)
    xte, yte = draw(n_test)
    spec = DatasetSpec("synthetic-gaussian-classes", classes, n_train, n_test)
    return Dataset(spec, xtr, ytr, xte, yte)


def synthetic_images(n_train: int = 1000, n_test: int = 200, classes: int = 10, size: int = 32,
                     noise: float = 0.35, seed: int = 0) -> Dataset:
    """Class-dependent smooth patterns plus noise, shaped like CIFAR images (values in [0, 1])."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    protos = []
    for _ in range(classes):
        fx, fy, phase = rng.uniform(1, 4, 3)
        color = rng.uniform(0.2, 1.0, 3)
        pattern = 0.5 + 0.5 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase * np.pi)
        protos.append(color[:, None, None] * pattern[None])
    protos = np.stack(protos)

    def draw(n):
        y = rng.integers(0, classes, size=n)
        shift = rng.integers(-3, 4, size=(n, 2))
        x = np.stack([np.roll(protos[c], tuple(s), axis=(1, 2)) for c, s in zip(y, shift)])
        x = np.clip(x + noise * rng.normal(size=x.shape), 0, 1)
        return x.astype(np.float32), y.astype(np.int64)

    xtr, ytr = draw(n_train)
    xte, yte = draw(n_test)
    mean, std = channel_stats(xtr)
    spec = DatasetSpec("synthetic-images", classes, n_train, n_test, mean.tolist(), std.tolist())
    return Dataset(spec, normalize(xtr, mean, std), ytr, normalize(xte, mean, std), yte)


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None):
    """Index batches; shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


__all__ = [
    "CIFAR_DIR_ENV",
    "Dataset",
    "DatasetSpec",
    "RECORD_BYTES",
    "augment",
    "batches",
    "channel_stats",
    "cifar10_dataset",
    "cifar10_dir",
    "crop",
    "gaussian_classes",
    "hflip",
    "load_cifar10",
    "normalize",
    "read_cifar10_file",
    "subset",
    "synthetic_images",
    "write_cifar10_file",
]
