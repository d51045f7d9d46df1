"""Seeded synthetic classification data, IDX image files, and shuffled batching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


class IdxFormatError(IdxError):
    """Wrong magic number."""


class IdxLengthError(IdxError):
    """File shorter (or longer) than its header promises."""


class IdxConsistencyError(IdxError):
    """Image and label files disagree on the sample count."""


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: str = ""

    def __post_init__(self):
        if len(self.features) == 0:
            raise ValueError("dataset is empty")
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class MixtureSpec:
    num_classes: int = 20
    dim: int = 64
    clusters_per_class: int = 3
    cluster_std: float = 1.0
    inter_class_margin: float = 1.0
    train_size: int = 20000
    test_size: int = 4000
    seed: int = 0
    latent_dim: int = 0

    def __post_init__(self):
        for name in ("num_classes", "dim", "clusters_per_class", "train_size", "test_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.cluster_std > 0:
            raise ValueError("cluster_std must be positive")
        if self.latent_dim < 0:
            raise ValueError("latent_dim must be non-negative")


def _stratified_labels(rng, n: int, C: int) -> np.ndarray:
    return rng.permutation(np.arange(n) % C)


def generate_mixture(spec: MixtureSpec) -> tuple[Dataset, Dataset]:
    """Gaussian mixture with ``clusters_per_class`` centres per class.

    Centres are drawn with scale ``inter_class_margin``.  With
    ``latent_dim > 0`` the mixture lives in that many dimensions and is
    mapped into ``dim`` dimensions by a fixed random linear map (plus
    isotropic noise of the same ``cluster_std``), which keeps the classes
    entangled instead of trivially separable in high dimension.
    """
    rng = np.random.default_rng(spec.seed)
    C, k = spec.num_classes, spec.clusters_per_class
    space = spec.latent_dim or spec.dim
    centres = rng.normal(0.0, spec.inter_class_margin, size=(C, k, space))
    proj = rng.normal(0.0, 1.0 / np.sqrt(space), size=(space, spec.dim)) if spec.latent_dim else None

    def draw(n: int, tag: str) -> Dataset:
        labels = _stratified_labels(rng, n, C)
        which = rng.integers(0, k, size=n)
        x = centres[labels, which] + rng.normal(0.0, spec.cluster_std, size=(n, space))
        if proj is not None:
            x = x @ proj + rng.normal(0.0, spec.cluster_std, size=(n, spec.dim))
        return Dataset(x, labels.astype(np.int64), C, f"synthetic(seed={spec.seed},{tag})")

    return draw(spec.train_size, "train"), draw(spec.test_size, "test")


def standardize(train: Dataset, test: Dataset) -> tuple[Dataset, Dataset]:
    """Per-dimension standardization with train statistics applied to both splits."""
    mu = train.features.mean(axis=0)
    sd = train.features.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (replace(train, features=(train.features - mu) / sd),
            replace(test, features=(test.features - mu) / sd))


def batches(ds: Dataset, batch_size: int, epoch_seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Seeded shuffle, then consecutive batches; the last one may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    order = np.random.default_rng(epoch_seed).permutation(len(ds))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield ds.features[idx], ds.labels[idx]


# -- IDX ------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _parse_idx(raw: bytes, expected_magic: int, ndims: int, path) -> tuple[tuple, bytes]:
    header_len = 4 + 4 * ndims
    if len(raw) < 4:
        raise IdxLengthError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if len(raw) < header_len:
        raise IdxLengthError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndims}I", raw[4:header_len])
    body = raw[header_len:]
    expected = int(np.prod(dims))
    if len(body) != expected:
        raise IdxLengthError(f"{path}: {len(body)} data bytes, header promises {expected}")
    return dims, body


def read_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1] and flattened."""
    (n, rows, cols), pixels = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    (m,), label_bytes = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if n != m:
        raise IdxConsistencyError(f"{n} images but {m} labels")
    features = np.frombuffer(pixels, dtype=np.uint8).reshape(n, rows * cols) / 255.0
    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    C = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(features, labels, C, f"idx({images_path},{labels_path})")


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write ``images[N, rows, cols]`` and ``labels[N]`` (both uint8) as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or labels.shape != (images.shape[0],):
        raise ValueError("expected images[N, rows, cols] and labels[N]")
    n, r, c = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, r, c) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, n) + labels.tobytes())
