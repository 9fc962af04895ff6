"""MNIST-format IDX ingestion, deterministic splits, and batching.

Images load as float64 in [0, 1] with shape (N, channels, H, W); labels as
int64. All shuffling is seeded, so any (seed, epoch) pair reproduces the
same order bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, FormatError, InputError
from .perturb import PatternAssignment

__all__ = [
    "LabeledDataset",
    "load_mnist_idx",
    "save_mnist_idx",
    "split",
    "batches",
    "subsample",
    "save_dataset",
    "load_dataset",
    "TRAIN_IMAGES",
    "TRAIN_LABELS",
    "TEST_IMAGES",
    "TEST_LABELS",
]

_IMAGE_MAGIC = 0x00000803
_LABEL_MAGIC = 0x00000801

TRAIN_IMAGES = "train-images-idx3-ubyte"
TRAIN_LABELS = "train-labels-idx1-ubyte"
TEST_IMAGES = "t10k-images-idx3-ubyte"
TEST_LABELS = "t10k-labels-idx1-ubyte"


@dataclass
class LabeledDataset:
    """Images in [0, 1], integer labels, and an optional pattern assignment."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10
    assignment: PatternAssignment | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InputError(f"images must have 4 axes (N, c, H, W), got {self.images.ndim}")
        if self.labels.shape != (self.images.shape[0],):
            raise InputError(
                f"label count {self.labels.shape} does not match image count {self.images.shape[0]}"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(
                f"labels must lie in [0, {self.num_classes}), got range "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    def take(self, idx: np.ndarray) -> "LabeledDataset":
        """Subset by index array; the assignment, if any, follows along."""
        assignment = None
        if self.assignment is not None:
            assignment = PatternAssignment(
                self.assignment.mode, tuple(self.assignment.kernel_ids[i] for i in idx)
            )
        return LabeledDataset(self.images[idx], self.labels[idx],
                              num_classes=self.num_classes, assignment=assignment)


def _read_idx(path, magic_expected: int, kind: str):
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError(f"{path}: truncated at byte {len(data)}, expected 4-byte magic at offset 0")
    (magic,) = struct.unpack(">i", data[:4])
    if magic != magic_expected:
        raise FormatError(
            f"{path}: magic 0x{magic:08x} at offset 0, expected 0x{magic_expected:08x} for {kind}"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{path}: truncated at byte {len(data)}, dimension table needs {header} bytes")
    dims = struct.unpack(f">{ndim}i", data[4:header])
    count = 1
    for d in dims:
        if d < 0:
            raise FormatError(f"{path}: negative dimension {d} in header")
        count *= d
    if len(data) != header + count:
        raise FormatError(
            f"{path}: payload has {len(data) - header} bytes at offset {header}, "
            f"header declares {count}"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist_idx(image_path, label_path) -> LabeledDataset:
    """Parse a big-endian IDX image/label file pair.

    Pixels are scaled to [0, 1] by dividing by 255; images come out as
    (N, 1, H, W). Malformed files raise FormatError naming the byte offset.
    """
    raw = _read_idx(image_path, _IMAGE_MAGIC, "images")
    labels = _read_idx(label_path, _LABEL_MAGIC, "labels")
    if raw.shape[0] != labels.shape[0]:
        raise FormatError(
            f"image count {raw.shape[0]} ({image_path}) does not match "
            f"label count {labels.shape[0]} ({label_path})"
        )
    images = raw.astype(np.float64) / 255.0
    return LabeledDataset(images[:, None, :, :], labels.astype(np.int64))


def save_mnist_idx(images: np.ndarray, labels: np.ndarray, image_path, label_path) -> None:
    """Write uint8 images (N, H, W) and labels (N,) as an IDX file pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3:
        raise InputError(f"images must have shape (N, H, W), got {images.shape}")
    if labels.shape != (images.shape[0],):
        raise InputError("label count does not match image count")
    with open(image_path, "wb") as f:
        f.write(struct.pack(">iiii", _IMAGE_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(label_path, "wb") as f:
        f.write(struct.pack(">ii", _LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def split(dataset: LabeledDataset, fractions, seed: int):
    """Seeded permutation followed by a contiguous cut into (train, validation).

    fractions is a (train, validation) pair summing to 1. The validation
    part may be empty; an empty training part is a configuration error.
    """
    if len(fractions) != 2:
        raise ConfigError(f"fractions must be a (train, validation) pair, got {fractions!r}")
    f0, f1 = float(fractions[0]), float(fractions[1])
    if f0 < 0 or f1 < 0 or abs(f0 + f1 - 1.0) > 1e-9:
        raise ConfigError(f"fractions must be non-negative and sum to 1, got {fractions!r}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(f0 * n))
    if n_train == 0:
        raise ConfigError(f"split leaves the training set empty (fractions {fractions!r}, N={n})")
    return dataset.take(perm[:n_train]), dataset.take(perm[n_train:])


def batches(dataset: LabeledDataset, batch_size: int, seed: int, epoch: int):
    """Yield (images, labels) batches in a per-epoch seeded shuffle order.

    The final short batch is kept, so one epoch is exactly one permutation
    of the dataset.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    for lo in range(0, n, batch_size):
        idx = perm[lo : lo + batch_size]
        yield dataset.images[idx], dataset.labels[idx]


def subsample(dataset: LabeledDataset, n: int, seed: int) -> LabeledDataset:
    """Seeded random subset of n samples (all of them if n >= len)."""
    if n < 1:
        raise ConfigError(f"subsample size must be >= 1, got {n}")
    total = len(dataset)
    if n >= total:
        return dataset
    perm = np.random.default_rng([seed, 815]).permutation(total)
    return dataset.take(perm[:n])


def save_dataset(dataset: LabeledDataset, images_path, manifest_path) -> None:
    """Cache a (possibly perturbed) dataset: binary tensors plus a text manifest."""
    from . import checkpoint
    from .perturb import assignment_manifest

    checkpoint.save_tensors(images_path, [dataset.images, dataset.labels.astype(np.float64)])
    if dataset.assignment is not None:
        Path(manifest_path).write_text(assignment_manifest(dataset))


def load_dataset(images_path, manifest_path=None, num_classes: int = 10) -> LabeledDataset:
    from . import checkpoint
    from .perturb import parse_assignment_manifest

    images, labels = checkpoint.load_tensors(images_path)
    assignment = None
    if manifest_path is not None and Path(manifest_path).exists():
        mode, _, ids = parse_assignment_manifest(Path(manifest_path).read_text())
        assignment = PatternAssignment(mode, ids)
    return LabeledDataset(images, labels.astype(np.int64), num_classes=num_classes,
                          assignment=assignment)
