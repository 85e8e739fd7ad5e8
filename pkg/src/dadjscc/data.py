"""CIFAR-10/100 binary-format ingestion, batching and subsetting."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

PIXELS = 3 * 32 * 32

CIFAR_FILES = {
    ("cifar10", "train"): [f"data_batch_{i}.bin" for i in range(1, 6)],
    ("cifar10", "test"): ["test_batch.bin"],
    ("cifar100", "train"): ["train.bin"],
    ("cifar100", "test"): ["test.bin"],
}
# upstream archives unpack into these subdirectories
CIFAR_SUBDIRS = {"cifar10": "cifar-10-batches-bin", "cifar100": "cifar-100-binary"}
LABEL_BYTES = {"cifar10": 1, "cifar100": 2}
NUM_CLASSES = {"cifar10": 10, "cifar100": 100}


class DataFormatError(ValueError):
    pass


@dataclass
class ImageDataset:
    images: np.ndarray   # [N, 3, 32, 32] float32 in [0, 1]
    labels: np.ndarray   # [N] int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[1:] != (3, 32, 32):
            raise DataFormatError(f"images must be [N,3,32,32], got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DataFormatError("images and labels differ in length")
        if len(self.labels) and self.labels.max() >= self.num_classes:
            raise DataFormatError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "ImageDataset":
        return ImageDataset(self.images[idx], self.labels[idx], self.num_classes, self.split)


def read_cifar_file(path, which: str) -> tuple[np.ndarray, np.ndarray]:
    """Parse one binary batch file into (uint8 images [N,3,32,32], labels)."""
    nlab = LABEL_BYTES[which]
    record = nlab + PIXELS
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except OSError as exc:
        raise FileNotFoundError(f"cannot read CIFAR file {path}: {exc}") from exc
    if raw.size == 0 or raw.size % record:
        raise DataFormatError(f"{path}: length {raw.size} is not a multiple of record size {record}")
    rows = raw.reshape(-1, record)
    labels = rows[:, nlab - 1].astype(np.int64)  # CIFAR-100: keep the fine label
    images = rows[:, nlab:].reshape(-1, 3, 32, 32)
    return images, labels


def _resolve_dir(data_dir, which: str, files: list[str]) -> Path:
    base = Path(data_dir)
    for cand in (base, base / CIFAR_SUBDIRS[which]):
        if all((cand / f).is_file() for f in files):
            return cand
    missing = [f for f in files if not (base / f).is_file()]
    raise FileNotFoundError(f"{which} files not found in {base}: missing {missing}")


def load_cifar(data_dir, which: str = "cifar10", split: str = "train") -> ImageDataset:
    which = which.lower().replace("-", "")
    if (which, split) not in CIFAR_FILES:
        raise ValueError(f"unknown dataset/split {which!r}/{split!r}")
    files = CIFAR_FILES[(which, split)]
    base = _resolve_dir(data_dir, which, files)
    parts = [read_cifar_file(base / f, which) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return ImageDataset(to_unit_range(images), labels, NUM_CLASSES[which], split)


def to_unit_range(images_u8: np.ndarray) -> np.ndarray:
    return images_u8.astype(np.float32) / np.float32(255.0)


def to_bytes(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)


def write_cifar_file(path, images_u8: np.ndarray, labels, which: str = "cifar10",
                     coarse_labels=None) -> None:
    """Write records in the upstream binary layout (test fixtures, exports)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(-1, PIXELS)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    cols = [labels, images_u8]
    if LABEL_BYTES[which] == 2:
        coarse = np.zeros_like(labels) if coarse_labels is None else \
            np.asarray(coarse_labels, dtype=np.uint8).reshape(-1, 1)
        cols.insert(0, coarse)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.concatenate(cols, axis=1).tofile(path)


def default_data_dir(explicit=None) -> Path | None:
    if explicit:
        return Path(explicit)
    env = os.environ.get("DADJSCC_DATA_DIR")
    return Path(env) if env else None


def batch_iter(ds: ImageDataset, batch_size: int, shuffle: bool = False,
               rng: np.random.Generator | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` batches covering every index once; last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    n = len(ds)
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]


def take_subset(ds: ImageDataset, n: int, rng: np.random.Generator) -> ImageDataset:
    """Seeded class-stratified sample of ``n`` images (returned in shuffled order)."""
    if n < 1:
        raise ValueError("subset size must be positive")
    if n > len(ds):
        raise ValueError(f"subset of {n} requested from {len(ds)} images")
    classes, counts = np.unique(ds.labels, return_counts=True)
    # largest-remainder allocation proportional to class frequency
    exact = counts * n / len(ds)
    alloc = np.floor(exact).astype(int)
    short = n - alloc.sum()
    if short:
        order = np.argsort(-(exact - alloc), kind="stable")
        alloc[order[:short]] += 1
    picked = []
    for cls, k in zip(classes, alloc):
        members = np.flatnonzero(ds.labels == cls)
        picked.append(rng.choice(members, size=k, replace=False))
    idx = rng.permutation(np.concatenate(picked))
    return ds.take(idx)
