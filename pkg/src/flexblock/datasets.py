"""Desk-scale image classification data (10 classes, 1x16x16)."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["Dataset", "make_benchmark", "load_reduced_mnist", "load_dataset"]


@dataclass(frozen=True)
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int = 10
    name: str = "synthetic"

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.x_train.shape[1:])


def _stroke(size: int, rng: np.random.Generator) -> np.ndarray:
    """A soft line segment with random position, angle and length."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(3, size - 3, 2)
    theta = rng.uniform(0, np.pi)
    half = rng.uniform(2.0, 5.0)
    dy, dx = np.sin(theta), np.cos(theta)
    t = np.clip((yy - cy) * dy + (xx - cx) * dx, -half, half)
    dist2 = (yy - cy - t * dy) ** 2 + (xx - cx - t * dx) ** 2
    return np.exp(-dist2 / (2 * 0.8 ** 2))


def make_benchmark(n_train: int = 2000, n_test: int = 1000, n_classes: int = 10, size: int = 16,
                   noise: float = 0.3, strokes: int = 3, max_shift: int = 2,
                   seed: int = 0) -> Dataset:
    """Synthetic stroke-pattern classification.

    Each class is a fixed set of ``strokes`` soft line segments.  Samples are
    shifted by up to ``max_shift`` pixels, rescaled in intensity, partly
    occluded by a random distractor stroke and corrupted with Gaussian noise.
    The generator depends only on its arguments.
    """
    rng = np.random.default_rng(seed)
    protos = np.stack([sum(_stroke(size, rng) for _ in range(strokes)) for _ in range(n_classes)])
    protos /= protos.max(axis=(1, 2), keepdims=True)

    def draw(n: int):
        y = np.arange(n) % n_classes
        rng.shuffle(y)
        x = np.empty((n, 1, size, size))
        for i, label in enumerate(y):
            img = protos[label] * rng.uniform(0.7, 1.3)
            img = np.roll(img, tuple(rng.integers(-max_shift, max_shift + 1, 2)), axis=(0, 1))
            img = img + 0.6 * _stroke(size, rng)
            x[i, 0] = img + noise * rng.standard_normal((size, size))
        return x, y

    x_train, y_train = draw(n_train)
    x_test, y_test = draw(n_test)
    mean, std = x_train.mean(), x_train.std()
    return Dataset((x_train - mean) / std, y_train, (x_test - mean) / std, y_test, n_classes, "synthetic")


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        _, dtype, ndim = struct.unpack(">HBB", fh.read(4))
        if dtype != 0x08:
            raise ValueError(f"{path}: only unsigned-byte IDX files are supported")
        dims = struct.unpack(f">{ndim}I", fh.read(4 * ndim))
        return np.frombuffer(fh.read(), dtype=np.uint8).reshape(dims)


def _find(root: Path, stem: str) -> Path:
    for cand in (root / stem, root / f"{stem}.gz"):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"{stem}[.gz] not found under {root}")


def load_reduced_mnist(root, n_train: int = 2000, n_test: int = 1000, seed: int = 0) -> Dataset:
    """Load local MNIST IDX files, pad 28->32 and 2x2-average down to 16x16."""
    root = Path(root)
    parts = {}
    for split, prefix in (("train", "train"), ("test", "t10k")):
        images = _read_idx(_find(root, f"{prefix}-images-idx3-ubyte")).astype(np.float64) / 255.0
        labels = _read_idx(_find(root, f"{prefix}-labels-idx1-ubyte")).astype(np.int64)
        images = np.pad(images, ((0, 0), (2, 2), (2, 2)))
        images = images.reshape(-1, 16, 2, 16, 2).mean(axis=(2, 4))[:, None]
        parts[split] = (images, labels)
    rng = np.random.default_rng(seed)
    tr = rng.permutation(len(parts["train"][1]))[:n_train]
    te = rng.permutation(len(parts["test"][1]))[:n_test]
    x_train, y_train = parts["train"][0][tr], parts["train"][1][tr]
    x_test, y_test = parts["test"][0][te], parts["test"][1][te]
    mean, std = x_train.mean(), x_train.std()
    return Dataset((x_train - mean) / std, y_train, (x_test - mean) / std, y_test, 10, "mnist16")


def load_dataset(spec) -> Dataset:
    """Build a dataset from a config dict (``{"name": "synthetic", ...}``) or name."""
    if isinstance(spec, str):
        spec = {"name": spec}
    spec = dict(spec)
    name = spec.pop("name", "synthetic")
    if name == "synthetic":
        return make_benchmark(**spec)
    if name == "mnist16":
        return load_reduced_mnist(**spec)
    raise ValueError(f"unknown dataset {name!r}")
