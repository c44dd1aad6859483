"""CIFAR binary ingestion, a synthetic shapes dataset, augmentation and batch assembly."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .ops import resize_array

IMAGE_SIZE = 32
RECORD_PIXELS = 3 * IMAGE_SIZE * IMAGE_SIZE
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILES = ["test_batch.bin"]
DATA_ENV = "MIXSIZE_DATA"


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Raw uint8 images [N, 3, 32, 32] with integer labels.

    ``mean``/``std`` are per-channel constants on the [0, 1] scale; they are
    taken from the training split and shared with the matching test split.
    """

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) == 0:
            raise DataFormatError("empty dataset")
        if len(self.images) != len(self.labels):
            raise DataFormatError("images and labels differ in length")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataFormatError("label out of range")
        if self.mean is None:
            x = self.images.astype(np.float64) / 255.0
            self.mean = x.mean(axis=(0, 2, 3))
            self.std = x.std(axis=(0, 2, 3)) + 1e-8

    def __len__(self):
        return len(self.labels)

    def normalized(self, idx=None, dtype=np.float32) -> np.ndarray:
        imgs = self.images if idx is None else self.images[idx]
        x = imgs.astype(np.float64) / 255.0
        x = (x - self.mean[:, None, None]) / self.std[:, None, None]
        return x.astype(dtype)

    def with_norm(self, other: "Dataset") -> "Dataset":
        """Copy of ``self`` using ``other``'s normalization constants."""
        return Dataset(self.images, self.labels, self.split, self.num_classes, other.mean, other.std)

    def subset(self, n: int, seed: int = 0) -> "Dataset":
        return self.take(stratified_indices(self.labels, n, self.num_classes, seed))

    def take(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.split, self.num_classes, self.mean, self.std)


def stratified_indices(labels: np.ndarray, n: int, num_classes: int, seed: int = 0) -> np.ndarray:
    """Seeded sample of ``n`` indices with (as near as possible) equal class counts."""
    if n > len(labels):
        raise ValueError(f"subset of {n} requested from {len(labels)} records")
    rng = np.random.default_rng(seed)
    per = np.full(num_classes, n // num_classes)
    per[: n % num_classes] += 1
    out = []
    for c in range(num_classes):
        pool = np.flatnonzero(labels == c)
        if len(pool) < per[c]:
            raise ValueError(f"class {c} has only {len(pool)} records")
        out.append(rng.choice(pool, per[c], replace=False))
    return np.sort(np.concatenate(out))


def read_cifar_file(path, label_bytes: int = 1, label_index: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Parse one CIFAR binary batch file.

    Each record is ``label_bytes`` label bytes then 3072 pixel bytes (R, G, B
    planes, row-major). CIFAR-100 records have 2 label bytes (coarse, fine);
    pass ``label_index=1`` to keep the fine label.
    """
    raw = Path(path).read_bytes()
    rec = label_bytes + RECORD_PIXELS
    if len(raw) == 0 or len(raw) % rec:
        whole = len(raw) // rec * rec
        raise DataFormatError(f"{path}: truncated record at byte offset {whole} "
                              f"(file has {len(raw)} bytes, record size {rec})")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, label_index].astype(np.int64)
    images = arr[:, label_bytes:].reshape(-1, 3, IMAGE_SIZE, IMAGE_SIZE).copy()
    return images, labels


def load_cifar10(path=None, subset: Optional[int] = None, seed: int = 0,
                 cifar100: bool = False) -> Tuple[Dataset, Dataset]:
    """Load train/test splits from a directory of CIFAR binary batch files."""
    root = Path(path or os.environ.get(DATA_ENV, "data"))
    if cifar100:
        train_files, test_files, lb, li, k = ["train.bin"], ["test.bin"], 2, 1, 100
    else:
        train_files, test_files, lb, li, k = TRAIN_FILES, TEST_FILES, 1, 0, 10

    def read(files):
        parts = []
        for f in files:
            p = root / f
            if not p.exists():
                raise DataFormatError(f"missing data file {p}")
            parts.append(read_cifar_file(p, lb, li))
        return np.concatenate([a for a, _ in parts]), np.concatenate([b for _, b in parts])

    xtr, ytr = read(train_files)
    xte, yte = read(test_files)
    train = Dataset(xtr, ytr, "train", k)
    if subset:
        train = train.subset(subset, seed)
        train = Dataset(train.images, train.labels, "train", k)
    test = Dataset(xte, yte, "test", k, train.mean, train.std)
    return train, test


# -- synthetic shapes ----------------------------------------------------------

SHAPES = ("disk", "square", "triangle", "plus", "hbar", "vbar", "ring", "diamond", "cross", "frame")


def _shape_mask(kind: str, r: float, cy: float, cx: float, thick: float) -> np.ndarray:
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE] + 0.5
    dy, dx = yy - cy, xx - cx
    ady, adx = np.abs(dy), np.abs(dx)
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        return (ady <= r * 0.85) & (adx <= r * 0.85)
    if kind == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (adx <= (dy + r) * 0.55)
    if kind == "plus":
        return ((ady <= thick) & (adx <= r)) | ((adx <= thick) & (ady <= r))
    if kind == "hbar":
        return (ady <= thick * 1.2) & (adx <= r)
    if kind == "vbar":
        return (adx <= thick * 1.2) & (ady <= r)
    if kind == "ring":
        d = np.sqrt(dy ** 2 + dx ** 2)
        return (d <= r) & (d >= r - 1.6 * thick)
    if kind == "diamond":
        return ady + adx <= r
    if kind == "cross":
        return ((np.abs(dy - dx) <= thick * 1.3) | (np.abs(dy + dx) <= thick * 1.3)) & (ady <= r * 0.75) & (adx <= r * 0.75)
    if kind == "frame":
        m = max(r * 0.85, 2 * thick + 1)
        outer = (ady <= m) & (adx <= m)
        inner = (ady <= m - 1.6 * thick) & (adx <= m - 1.6 * thick)
        return outer & ~inner
    raise ValueError(kind)


def synth_dataset(n: int, classes: int = 10, seed: int = 0, split: str = "train",
                  noise: float = 15.0, per_image: Tuple[int, int] = (3, 6)) -> Dataset:
    """Balanced dataset of bright geometric shapes scattered on dark noisy backgrounds.

    The class is the shape type; every image holds ``per_image`` (inclusive
    range) instances of it with their own radius (4 to 7 px), position and
    stroke width. Colours are random but the shape is always brighter than the
    background. Fully determined by ``seed``.
    """
    if classes > len(SHAPES) or classes < 2:
        raise ValueError(f"classes must lie in [2, {len(SHAPES)}]")
    if n < classes:
        raise ValueError("need at least one image per class")
    lo, hi = per_image
    if not 1 <= lo <= hi:
        raise ValueError("per_image must be a range (lo, hi) with 1 <= lo <= hi")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % classes
    labels = labels[rng.permutation(n)]
    images = np.empty((n, 3, IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
    for i, lab in enumerate(labels):
        bg = rng.uniform(0, 100, 3)
        fg = rng.uniform(140, 255, 3)
        mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
        for _ in range(rng.integers(lo, hi + 1)):
            r = rng.uniform(4.0, 7.0)
            cy, cx = rng.uniform(r * 0.6, IMAGE_SIZE - r * 0.6, 2)
            mask |= _shape_mask(SHAPES[lab], r, cy, cx, rng.uniform(1.2, 2.0))
        img = np.where(mask[None], fg[:, None, None], bg[:, None, None])
        img = img + rng.normal(0.0, noise, img.shape)
        images[i] = np.clip(img, 0, 255).astype(np.uint8)
    return Dataset(images, labels, split, classes)


def synth_splits(n_train: int, n_test: int, classes: int = 10, seed: int = 0) -> Tuple[Dataset, Dataset]:
    train = synth_dataset(n_train, classes, seed, "train")
    test = synth_dataset(n_test, classes, seed + 10_007, "test")
    return train, test.with_norm(train)


# -- augmentation --------------------------------------------------------------

@dataclass
class AugmentConfig:
    pad: int = 4
    flip_prob: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        if self.pad < 0:
            raise ValueError("pad must be non-negative")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")


def augment(image: np.ndarray, S: int, cfg: AugmentConfig, rng: np.random.Generator,
            offset: Optional[Tuple[int, int]] = None, flip: Optional[bool] = None) -> np.ndarray:
    """Zero-pad, random 32x32 crop, random horizontal flip, bilinear resize to S.

    ``offset``/``flip`` pin the random choices (crop offset is measured in the
    padded image, so ``(pad, pad)`` is the un-shifted crop).
    """
    c, h, w = image.shape
    if cfg.enabled:
        p = cfg.pad
        padded = np.pad(image, ((0, 0), (p, p), (p, p))) if p else image
        if offset is None:
            offset = (int(rng.integers(0, 2 * p + 1)), int(rng.integers(0, 2 * p + 1)))
        if flip is None:
            flip = bool(rng.random() < cfg.flip_prob)
        top, left = offset
        image = padded[:, top:top + h, left:left + w]
        if flip:
            image = image[:, :, ::-1]
    return resize_array(np.ascontiguousarray(image), S)


def make_batch(dataset: Dataset, indices: Sequence[int], S: int, D: int,
               cfg: AugmentConfig, rng: np.random.Generator, dtype=np.float32):
    """Images [B*D, 3, S, S] and labels; each sample repeated D times in a row,
    every copy with its own augmentation draw."""
    if D < 1:
        raise ValueError("D must be >= 1")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= len(dataset)):
        raise IndexError("batch index out of range")
    base = dataset.normalized(idx, np.float64)
    rep = np.repeat(np.arange(len(idx)), D)
    out = np.empty((len(rep), 3, S, S), dtype=dtype)
    if cfg.enabled:
        p = cfg.pad
        n = len(rep)
        offs = rng.integers(0, 2 * p + 1, size=(n, 2))
        flips = rng.random(n) < cfg.flip_prob
        # zero padding happens in raw pixel space, i.e. before normalization
        zero = ((0.0 - dataset.mean) / dataset.std)[:, None, None]
        padded = np.broadcast_to(zero, (len(idx), 3, IMAGE_SIZE + 2 * p, IMAGE_SIZE + 2 * p)).copy()
        padded[:, :, p:p + IMAGE_SIZE, p:p + IMAGE_SIZE] = base
        crops = np.empty((n, 3, IMAGE_SIZE, IMAGE_SIZE))
        for k, (src, (t, l), f) in enumerate(zip(rep, offs, flips)):
            crop = padded[src, :, t:t + IMAGE_SIZE, l:l + IMAGE_SIZE]
            crops[k] = crop[:, :, ::-1] if f else crop
    else:
        crops = base[rep]
    out[:] = resize_array(crops, S)
    return out, dataset.labels[idx][rep]
