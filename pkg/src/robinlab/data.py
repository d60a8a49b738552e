"""Datasets: synthetic Gaussian rings, IDX image loading, label coarsening,
one-vs-all relabeling, and balanced binary batching."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

__all__ = [
    "Dataset",
    "RelabelMap",
    "IdxFormatError",
    "gen_gaussians",
    "load_idx",
    "write_idx",
    "make_model_j",
    "make_one_vs_all",
    "apply_relabel",
    "permute_classes",
    "random_permutation",
    "balanced_batches",
    "dump_csv",
    "load_csv",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    """Labeled examples. inputs is (n, ...) float64, labels (n,) int64."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.inputs.shape[0]} inputs vs {self.labels.shape[0]} labels")
        if self.labels.size < 1:
            raise ValueError("empty dataset")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx: np.ndarray, name: str | None = None) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes,
                       self.name if name is None else name)


@dataclass(frozen=True)
class RelabelMap:
    """Total, surjective map original class -> new class."""

    mapping: tuple[int, ...]
    new_num_classes: int

    def __post_init__(self):
        if set(self.mapping) != set(range(self.new_num_classes)):
            raise ValueError(
                f"mapping {self.mapping} is not surjective onto [0, {self.new_num_classes})")

    def __call__(self, labels: np.ndarray) -> np.ndarray:
        return np.asarray(self.mapping, dtype=np.int64)[labels]


def apply_relabel(dataset: Dataset, rm: RelabelMap, name: str | None = None) -> Dataset:
    """New labels, same input tensors (shared, bit-exact)."""
    if len(rm.mapping) != dataset.num_classes:
        raise ValueError(
            f"relabel map covers {len(rm.mapping)} classes, dataset has {dataset.num_classes}")
    return Dataset(dataset.inputs, rm(dataset.labels), rm.new_num_classes,
                   dataset.name if name is None else name)


def gen_gaussians(k: int, n_per_class: int, spread: float, seed: int,
                  name: str = "gaussians") -> Dataset:
    """2-D classes centered on the unit circle at angles 2*pi*c/k,
    isotropic Gaussian noise with std ``spread``."""
    if k < 2:
        raise ValueError(f"need k >= 2 classes, got {k}")
    rng = np.random.default_rng(seed)
    angles = 2.0 * np.pi * np.arange(k) / k
    centers = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    xs, ys = [], []
    for c in range(k):
        xs.append(centers[c] + spread * rng.standard_normal((n_per_class, 2)))
        ys.append(np.full(n_per_class, c, dtype=np.int64))
    return Dataset(np.concatenate(xs), np.concatenate(ys), k, name)


# ---------------------------------------------------------------------------
# IDX container (big-endian headers, as standard)
# ---------------------------------------------------------------------------

class IdxFormatError(Exception):
    pass


def _read_exact(f, n: int, what: str) -> bytes:
    raw = f.read(n)
    if len(raw) != n:
        raise IdxFormatError(f"truncated IDX file while reading {what}")
    return raw


def load_idx(images_path: str, labels_path: str, downsample: bool = True,
             name: str = "idx") -> Dataset:
    """Load an image/label IDX pair; pixels scaled to [0,1] float64.

    With ``downsample`` the images are 2x2 average-pooled (28x28 -> 14x14)
    for desk-scale training. Output shape is (n, 1, H, W).
    """
    with open(images_path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, "image magic"))
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(f"image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        n, rows, cols = struct.unpack(">III", _read_exact(f, 12, "image dims"))
        raw = _read_exact(f, n * rows * cols, "image pixels")
    with open(labels_path, "rb") as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, "label magic"))
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(f"label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        (n_labels,) = struct.unpack(">I", _read_exact(f, 4, "label count"))
        raw_labels = _read_exact(f, n_labels, "labels")
    if n != n_labels:
        raise IdxFormatError(f"{n} images but {n_labels} labels")

    images = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    images = images.reshape(n, 1, rows, cols)
    if downsample:
        if rows % 2 or cols % 2:
            raise IdxFormatError(f"cannot 2x2-pool odd image size {rows}x{cols}")
        images = images.reshape(n, 1, rows // 2, 2, cols // 2, 2).mean(axis=(3, 5))
    labels = np.frombuffer(raw_labels, dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, int(labels.max()) + 1, name)


def write_idx(images_path: str, labels_path: str, images: np.ndarray,
              labels: np.ndarray) -> None:
    """Write (n, H, W) or (n, 1, H, W) uint8 pixels and labels as IDX files."""
    if images.ndim == 4:
        images = images[:, 0]
    n, rows, cols = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(np.ascontiguousarray(images, dtype=np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------------------
# label transformations
# ---------------------------------------------------------------------------

def make_model_j(k: int, j: int) -> RelabelMap:
    """Coarsen k classes to j: classes 0..j-2 keep their identity, classes
    j-1..k-1 collapse into the superclass j-1.

    j=2 is the binary "class 0 vs rest" task; j=k is the identity.
    """
    if not 2 <= j <= k:
        raise ValueError(f"j must be in [2, {k}], got {j}")
    mapping = tuple(min(c, j - 1) for c in range(k))
    return RelabelMap(mapping, j)


def make_one_vs_all(k: int, i: int) -> RelabelMap:
    """Label 1 for class i, 0 otherwise."""
    if not 0 <= i < k:
        raise ValueError(f"class index {i} outside [0, {k})")
    return RelabelMap(tuple(1 if c == i else 0 for c in range(k)), 2)


def random_permutation(k: int, seed: int) -> tuple[int, ...]:
    return tuple(int(c) for c in np.random.default_rng(seed).permutation(k))


def permute_classes(dataset: Dataset, permutation: tuple[int, ...]) -> Dataset:
    """Relabel class c as permutation[c] (a bijection on [0, k))."""
    if sorted(permutation) != list(range(dataset.num_classes)):
        raise ValueError(f"{permutation} is not a permutation of [0, {dataset.num_classes})")
    rm = RelabelMap(tuple(permutation), dataset.num_classes)
    return apply_relabel(dataset, rm)


def balanced_batches(dataset: Dataset, batch_size: int, seed: int
                     ) -> Iterator[np.ndarray]:
    """One epoch of index batches with exactly 50% positive labels each.

    Negatives are shuffled and consumed without replacement (wrapping for
    the final partial chunk); positives are sampled with replacement.
    Yields ceil(n_neg / (batch_size/2)) batches.
    """
    if dataset.num_classes != 2:
        raise ValueError(f"balanced_batches needs binary labels, got {dataset.num_classes} classes")
    if batch_size % 2:
        raise ValueError(f"batch_size must be even, got {batch_size}")
    pos = np.flatnonzero(dataset.labels == 1)
    neg = np.flatnonzero(dataset.labels == 0)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both labels must be present")
    half = batch_size // 2
    rng = np.random.default_rng(seed)
    neg_order = rng.permutation(neg)
    n_batches = int(np.ceil(neg.size / half))
    for b in range(n_batches):
        chunk = neg_order.take(range(b * half, (b + 1) * half), mode="wrap")
        pos_draw = rng.choice(pos, size=half, replace=True)
        yield np.concatenate([pos_draw, chunk])


# ---------------------------------------------------------------------------
# CSV dump/load for 2-D synthetic data
# ---------------------------------------------------------------------------

def dump_csv(dataset: Dataset, path: str) -> None:
    if dataset.inputs.ndim != 2 or dataset.inputs.shape[1] != 2:
        raise ValueError(f"CSV dump is for 2-D inputs, got shape {dataset.inputs.shape}")
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x0", "x1", "label"])
        for (x0, x1), y in zip(dataset.inputs, dataset.labels):
            w.writerow([repr(float(x0)), repr(float(x1)), int(y)])


def load_csv(path: str, name: str = "csv") -> Dataset:
    xs, ys = [], []
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = next(r)
        if header != ["x0", "x1", "label"]:
            raise ValueError(f"unexpected CSV header {header}")
        for row in r:
            xs.append([float(row[0]), float(row[1])])
            ys.append(int(row[2]))
    labels = np.asarray(ys, dtype=np.int64)
    return Dataset(np.asarray(xs), labels, int(labels.max()) + 1, name)
