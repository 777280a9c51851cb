"""Dataset construction and non-IID partitioning.

Two sources: a deterministic synthetic generator (each class is an
oriented intensity gradient plus a class-keyed blob, with per-sample
noise) and a loader for the IDX binary format (big-endian uint32 headers,
magic 0x00000803 for images / 0x00000801 for labels, uint8 payload).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import (
    BadMagicError,
    ConfigError,
    CountMismatchError,
    PartitionError,
    TruncatedFileError,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # (n, c, h, w) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    class_count: int

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            raise ConfigError(f"images must be (n, c, h, w) with n >= 1, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ConfigError("labels length must match image count")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ConfigError("labels must lie in [0, class_count)")

    def __len__(self) -> int:
        return self.images.shape[0]


# --------------------------------------------------------------------------
# Synthetic generator
# --------------------------------------------------------------------------


def _class_pattern(label: int, classes: int, shape: tuple[int, int, int]) -> np.ndarray:
    """Noise-free prototype for one class: oriented gradient + placed blob."""
    c, h, w = shape
    ys, xs = np.meshgrid(np.linspace(-0.5, 0.5, h), np.linspace(-0.5, 0.5, w), indexing="ij")
    angle = 2.0 * np.pi * label / classes
    grad = 0.5 + 0.6 * (np.cos(angle) * xs + np.sin(angle) * ys)

    blob_angle = 2.0 * np.pi * label / classes + np.pi / classes
    cy, cx = 0.3 * np.sin(blob_angle), 0.3 * np.cos(blob_angle)
    dist2 = (ys - cy) ** 2 + (xs - cx) ** 2
    blob = np.exp(-dist2 / (2 * 0.12**2))

    base = np.clip(0.55 * grad + 0.6 * blob, 0.0, 1.0)
    return np.broadcast_to(base, (c, h, w)).astype(np.float64)


def generate_synthetic(classes: int, per_class: int, shape: tuple[int, int, int] = (1, 16, 16),
                       seed: int = 0, noise_sigma: float = 0.15) -> Dataset:
    """Balanced synthetic dataset, bitwise deterministic per seed."""
    if classes < 1 or per_class < 1 or any(d < 1 for d in shape):
        raise ConfigError("classes, per_class and shape extents must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xDA7A]))
    n = classes * per_class
    images = np.empty((n,) + tuple(shape), dtype=nn.DTYPE)
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for label in range(classes):
        base = _class_pattern(label, classes, shape)
        for _ in range(per_class):
            sample = base
            if noise_sigma > 0:
                sample = sample + rng.normal(0.0, noise_sigma, size=shape)
            images[i] = np.clip(sample, 0.0, 1.0).astype(nn.DTYPE)
            labels[i] = label
            i += 1
    return Dataset(images, labels, classes)


# --------------------------------------------------------------------------
# IDX loader
# --------------------------------------------------------------------------


def _read_exact(fh, count: int, path: str, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise TruncatedFileError(f"{path}: truncated while reading {what}")
    return data


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Load an IDX image/label file pair, scaling pixels to [0, 1]."""
    with open(images_path, "rb") as fh:
        magic = struct.unpack(">I", _read_exact(fh, 4, images_path, "magic"))[0]
        if magic != IDX_IMAGES_MAGIC:
            raise BadMagicError(
                f"{images_path}: magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
            )
        n, h, w = struct.unpack(">III", _read_exact(fh, 12, images_path, "dimensions"))
        raw = _read_exact(fh, n * h * w, images_path, "pixel data")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w)

    with open(labels_path, "rb") as fh:
        magic = struct.unpack(">I", _read_exact(fh, 4, labels_path, "magic"))[0]
        if magic != IDX_LABELS_MAGIC:
            raise BadMagicError(
                f"{labels_path}: magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
            )
        (n_labels,) = struct.unpack(">I", _read_exact(fh, 4, labels_path, "count"))
        raw = _read_exact(fh, n_labels, labels_path, "label data")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if n != n_labels:
        raise CountMismatchError(
            f"{images_path} has {n} images but {labels_path} has {n_labels} labels"
        )
    return Dataset(
        (images.astype(nn.DTYPE) / 255.0),
        labels,
        class_count=int(labels.max()) + 1 if n else 0,
    )


def write_idx(images_path: str, labels_path: str, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (n, h, w) and labels (n,) in IDX format."""
    n, h, w = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(images.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(labels.astype(np.uint8).tobytes())


# --------------------------------------------------------------------------
# Non-IID partitioning
# --------------------------------------------------------------------------


@dataclass
class ShardAssignment:
    client_indices: list[np.ndarray]   # disjoint sample indices per client
    client_classes: list[list[int]]    # permitted classes per client

    @property
    def n_clients(self) -> int:
        return len(self.client_indices)


def partition_noniid(dataset: Dataset, n_clients: int, classes_per_client: int,
                     seed: int) -> ShardAssignment:
    """Give each client samples from a small random set of classes.

    Per client, the permitted classes are drawn uniformly without
    replacement; each class's samples are dealt round-robin among its
    subscribers, and classes nobody picked are redistributed round-robin
    so no data is dropped.
    """
    if classes_per_client < 1 or classes_per_client > dataset.class_count:
        raise PartitionError(
            f"classes_per_client must be in [1, {dataset.class_count}], got {classes_per_client}"
        )
    if n_clients < 1:
        raise PartitionError(f"need at least one client, got {n_clients}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x50A7]))

    chosen: list[list[int]] = [
        sorted(rng.choice(dataset.class_count, size=classes_per_client, replace=False).tolist())
        for _ in range(n_clients)
    ]
    subscribers: dict[int, list[int]] = {c: [] for c in range(dataset.class_count)}
    for client, classes in enumerate(chosen):
        for c in classes:
            subscribers[c].append(client)

    orphan_cursor = int(rng.integers(0, n_clients))
    for c in range(dataset.class_count):
        if not subscribers[c]:
            subscribers[c] = [orphan_cursor % n_clients]
            chosen[orphan_cursor % n_clients].append(c)
            orphan_cursor += 1

    shards: list[list[int]] = [[] for _ in range(n_clients)]
    for c in range(dataset.class_count):
        idx = np.flatnonzero(dataset.labels == c)
        idx = idx[rng.permutation(len(idx))]
        subs = list(subscribers[c])
        subs = [subs[i] for i in rng.permutation(len(subs))]
        for pos, sample in enumerate(idx):
            shards[subs[pos % len(subs)]].append(int(sample))

    if any(len(s) == 0 for s in shards):
        raise PartitionError("a client received an empty shard; not enough samples")
    return ShardAssignment(
        [np.array(sorted(s), dtype=np.int64) for s in shards],
        [sorted(set(c)) for c in chosen],
    )
