"""Datasets: a seeded synthetic shape generator and the CIFAR-10 binary reader."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .engine.checkpoint import FormatError, load_checkpoint, save_checkpoint

CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # N×C×H×W float32 in [0, 1] (before normalization)
    labels: np.ndarray  # N int64
    classes: int
    split: str = "train"

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.images.ndim != 4:
            raise ValueError(f"images must be N×C×H×W, got shape {self.images.shape}")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.classes)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        if idx.size == 0:
            idx = idx.astype(np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.classes, split or self.split)

    def normalized(self, mean: Sequence[float], std: Sequence[float]) -> "Dataset":
        m = np.asarray(mean, np.float32).reshape(1, -1, 1, 1)
        s = np.asarray(std, np.float32).reshape(1, -1, 1, 1)
        return Dataset(((self.images - m) / s).astype(np.float32), self.labels, self.classes, self.split)

    def save(self, path) -> None:
        save_checkpoint(path, {
            "images": self.images,
            "labels": self.labels.astype(np.float32),
            "classes": np.array([self.classes], np.float32),
        })

    @classmethod
    def load(cls, path, split: str = "train") -> "Dataset":
        t = load_checkpoint(path)
        return cls(t["images"], t["labels"].astype(np.int64), int(t["classes"][0]), split)


# -- synthetic shapes -------------------------------------------------------------

_PALETTE = np.array([
    [0.9, 0.2, 0.2], [0.2, 0.8, 0.2], [0.2, 0.3, 0.9], [0.9, 0.8, 0.1], [0.8, 0.2, 0.8],
    [0.1, 0.8, 0.8], [0.9, 0.5, 0.1], [0.5, 0.5, 0.5], [0.6, 0.3, 0.1], [0.3, 0.1, 0.5],
], np.float32)


def _shape_mask(kind: int, dx: np.ndarray, dy: np.ndarray, s: float) -> np.ndarray:
    ax, ay = np.abs(dx), np.abs(dy)
    r = np.sqrt(dx * dx + dy * dy)
    box = np.maximum(ax, ay) <= s
    if kind == 0:  # filled square
        return box
    if kind == 1:  # ring
        return np.abs(r - s) <= 0.8
    if kind == 2:  # plus
        return ((ax <= 0.8) & (ay <= s)) | ((ay <= 0.8) & (ax <= s))
    if kind == 3:  # diagonal cross
        return ((np.abs(dx - dy) <= 0.9) | (np.abs(dx + dy) <= 0.9)) & box
    if kind == 4:  # two horizontal bars
        return (np.abs(ay - s / 2) <= 0.8) & (ax <= s)
    if kind == 5:  # two vertical bars
        return (np.abs(ax - s / 2) <= 0.8) & (ay <= s)
    if kind == 6:  # triangle
        return (dy <= s) & (dy >= -s) & (ax <= (dy + s) / 2)
    if kind == 7:  # disc
        return r <= s
    if kind == 8:  # diamond
        return ax + ay <= s
    return (box & ((ax <= 0.8) | (ay <= 0.8) | (np.abs(ax - s) <= 0.8)))  # framed plus


def synth_generate(classes: int = 4, per_class: int = 500, resolution: int = 16,
                   difficulty: float = 0.5, seed: int = 0, split: str = "train") -> Dataset:
    """Class-conditioned shape images on a noisy background.

    The class decides the shape (and, at difficulty 0, a fixed colour, size and
    centred position).  ``difficulty`` in [0, 1] scales position jitter, size
    jitter, colour randomisation, contrast-polarity flips, background gradients
    and pixel noise.  Labels are exactly balanced and ordered by a seeded
    shuffle.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    if not 0 <= difficulty <= 1:
        raise ValueError(f"difficulty must lie in [0, 1], got {difficulty}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5E7]))
    n = classes * per_class
    labels = np.repeat(np.arange(classes), per_class)
    labels = labels[rng.permutation(n)]
    res = resolution
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float32)
    base_size = res / 4.0
    images = np.empty((n, 3, res, res), np.float32)
    d = float(difficulty)
    for i, k in enumerate(labels):
        kind = k % 10
        size = base_size * (1 + d * rng.uniform(-0.3, 0.3))
        span = max(res / 2 - size - 1, 0)
        cx = (res - 1) / 2 + d * rng.uniform(-span, span)
        cy = (res - 1) / 2 + d * rng.uniform(-span, span)
        m = _shape_mask(kind, xx - cx, yy - cy, size).astype(np.float32)
        colour = _PALETTE[(k + k // 10) % 10]
        colour = (1 - d) * colour + d * rng.uniform(0.2, 1.0, 3).astype(np.float32)
        polarity = -1.0 if rng.random() < d / 2 else 1.0
        level = 0.5 + d * rng.uniform(-0.15, 0.15)
        gx, gy = rng.uniform(-1, 1, 2) * d * 0.15 / res
        bg = level + gx * (xx - res / 2) + gy * (yy - res / 2)
        amp = 0.45
        img = bg[None] + polarity * amp * (colour[:, None, None] - 0.25) * 2 * m[None]
        img += rng.normal(0, 0.02 + 0.12 * d, img.shape).astype(np.float32)
        images[i] = np.clip(img, 0, 1)
    return Dataset(images, labels.astype(np.int64), classes, split)


# -- CIFAR-10 binary ----------------------------------------------------------------

def read_cifar10_binary(path, mean: Sequence[float] | None = None,
                        std: Sequence[float] | None = None, split: str = "train") -> Dataset:
    """Parse ``data_batch_*.bin`` / ``test_batch.bin`` (1 label byte + 3072 pixel bytes)."""
    buf = Path(path).read_bytes()
    if len(buf) % CIFAR_RECORD:
        whole = len(buf) // CIFAR_RECORD
        raise FormatError(f"{path}: truncated record at byte offset {whole * CIFAR_RECORD} "
                          f"({len(buf) - whole * CIFAR_RECORD} of {CIFAR_RECORD} bytes)")
    rec = np.frombuffer(buf, np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"{path}: label {labels[bad]} out of range at byte offset {bad * CIFAR_RECORD}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    ds = Dataset(images, labels, 10, split)
    if mean is not None and std is not None:
        ds = ds.normalized(mean, std)
    return ds


def concat(datasets: Sequence[Dataset], split: str = "train") -> Dataset:
    return Dataset(np.concatenate([d.images for d in datasets]),
                   np.concatenate([d.labels for d in datasets]), datasets[0].classes, split)


# -- batching / augmentation ----------------------------------------------------------

def augment(images: np.ndarray, rng: np.random.Generator, flip_prob: float = 0.5,
            crop_pad: int = 0) -> np.ndarray:
    """Per-sample random horizontal flip and reflect-pad-then-random-crop."""
    out = images
    if flip_prob > 0:
        flip = rng.random(images.shape[0]) < flip_prob
        if flip.any():
            out = out.copy()
            out[flip] = out[flip][..., ::-1]
    if crop_pad > 0:
        n, _, h, w = out.shape
        p = crop_pad
        padded = np.pad(out, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")
        oy = rng.integers(0, 2 * p + 1, n)
        ox = rng.integers(0, 2 * p + 1, n)
        out = np.stack([padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w] for i in range(n)])
    return out


def stratified_split(ds: Dataset, fraction: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Hold out ``fraction`` of every class; returns (train, val)."""
    held = []
    for k in range(ds.classes):
        idx = np.flatnonzero(ds.labels == k)
        take = int(round(fraction * idx.size))
        held.append(rng.permutation(idx)[:take])
    held_idx = np.sort(np.concatenate(held))
    keep = np.setdiff1d(np.arange(len(ds)), held_idx)
    return ds.subset(keep, "train"), ds.subset(held_idx, "val")


def batches(ds: Dataset, batch_size: int, rng: np.random.Generator | None = None,
            flip_prob: float = 0.0, crop_pad: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) minibatches; shuffled and augmented when ``rng`` is given."""
    order = rng.permutation(len(ds)) if rng is not None else np.arange(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start:start + batch_size]
        x = ds.images[idx]
        if rng is not None and (flip_prob or crop_pad):
            x = augment(x, rng, flip_prob, crop_pad)
        yield x, ds.labels[idx]
