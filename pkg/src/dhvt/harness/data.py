"""Datasets: CIFAR binary files and a synthetic Gaussian-blob set."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

# CIFAR-100 training-set channel statistics; recompute with scripts/cifar_stats.py
CIFAR100_MEAN = (0.5071, 0.4865, 0.4409)
CIFAR100_STD = (0.2673, 0.2564, 0.2762)

_PIXELS = 3 * 32 * 32
CIFAR_LAYOUTS = {
    # name: (label bytes per record, label byte used, split -> file names)
    "cifar100": (2, 1, {"train": ["train.bin"], "test": ["test.bin"]}),
    "cifar10": (1, 0, {"train": [f"data_batch_{i}.bin" for i in range(1, 6)], "test": ["test_batch.bin"]}),
}


class DataFormatError(IOError):
    """Malformed or truncated dataset file."""


@dataclass
class Dataset:
    images: np.ndarray   # (n, 3, H, W) float
    labels: np.ndarray   # (n,) int64

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
        """Yield (images, labels) minibatches, shuffled when `rng` is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            yield self.images[idx], self.labels[idx]

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.images.astype(dtype), self.labels)


def record_size(layout: str = "cifar100") -> int:
    return CIFAR_LAYOUTS[layout][0] + _PIXELS


def decode_cifar_file(path: str, layout: str = "cifar100") -> Tuple[np.ndarray, np.ndarray]:
    """Raw uint8 images (n, 3, 32, 32) and labels from one binary file.

    For CIFAR-100 the fine label (second byte of each record) is returned.
    """
    label_bytes, label_at, _ = CIFAR_LAYOUTS[layout]
    stride = label_bytes + _PIXELS
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % stride:
        n = raw.size // stride
        raise DataFormatError(f"{path}: size {raw.size} bytes is not a multiple of the {stride}-byte record; "
                              f"expected {n * stride} or {(n + 1) * stride} bytes, got {raw.size}")
    recs = raw.reshape(-1, stride)
    labels = recs[:, label_at].astype(np.int64)
    images = recs[:, label_bytes:].reshape(-1, 3, 32, 32)
    return images, labels


def detect_layout(directory: str) -> str:
    for name, (_, _, files) in CIFAR_LAYOUTS.items():
        if all(os.path.exists(os.path.join(directory, f)) for f in files["train"] + files["test"]):
            return name
    for name, (_, _, files) in CIFAR_LAYOUTS.items():
        if any(os.path.exists(os.path.join(directory, f)) for f in files["train"] + files["test"]):
            return name
    raise FileNotFoundError(f"no CIFAR binary files found in {directory}")


def load_cifar_binary(directory: str, split: str = "train", layout: Optional[str] = None,
                      mean: Sequence[float] = CIFAR100_MEAN, std: Sequence[float] = CIFAR100_STD,
                      normalize: bool = True, dtype=np.float32) -> Dataset:
    """Load a CIFAR split as float images in [0, 1], then per-channel standardized.

    Args:
        directory: folder holding the standard ``*.bin`` files.
        split: ``"train"`` or ``"test"``.
        layout: ``"cifar100"`` or ``"cifar10"``; detected from the file names when omitted.
        mean, std: per-channel constants applied after scaling to [0, 1].
        normalize: set False to get the unstandardized [0, 1] values.
    """
    layout = layout or detect_layout(directory)
    files = CIFAR_LAYOUTS[layout][2][split]
    imgs, labs = [], []
    for f in files:
        path = os.path.join(directory, f)
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        i, l = decode_cifar_file(path, layout)
        imgs.append(i)
        labs.append(l)
    images = np.concatenate(imgs).astype(dtype) / dtype(255.0)
    if normalize:
        m = np.asarray(mean, dtype=dtype).reshape(1, 3, 1, 1)
        s = np.asarray(std, dtype=dtype).reshape(1, 3, 1, 1)
        images = (images - m) / s
    return Dataset(images.astype(dtype), np.concatenate(labs))


def channel_stats(images: np.ndarray) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """Per-channel mean and std over (n, H, W)."""
    x = images.astype(np.float64)
    return tuple(x.mean(axis=(0, 2, 3))), tuple(x.std(axis=(0, 2, 3)))


def gen_synthetic(classes: int, n: int, size: int = 32, seed: int = 0, noise: float = 0.1,
                  dtype=np.float32) -> Dataset:
    """Class-conditional Gaussian blobs.

    Each class owns a blob position (on a ring) and an RGB color; samples are
    the class template plus i.i.d. pixel noise. Labels are balanced
    (``n // classes`` each, remainder to the lowest classes) and shuffled.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    radius, sigma = size / 4.0, size / 8.0
    templates = np.empty((classes, 3, size, size))
    colors = rng.uniform(0.2, 1.0, size=(classes, 3))
    for c in range(classes):
        theta = 2 * np.pi * c / classes
        cy, cx = size / 2 + radius * np.sin(theta), size / 2 + radius * np.cos(theta)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        templates[c] = colors[c][:, None, None] * blob
    labels = rng.permutation(np.arange(n) % classes).astype(np.int64)
    images = templates[labels] + noise * rng.standard_normal((n, 3, size, size))
    return Dataset(images.astype(dtype), labels)


def random_flip_crop(images: np.ndarray, rng: np.random.Generator, hflip: bool = True, crop_pad: int = 0) -> np.ndarray:
    """Per-sample random horizontal flip and pad-then-crop."""
    out = images.copy()
    n, _, h, w = images.shape
    if hflip:
        flip = rng.random(n) < 0.5
        out[flip] = out[flip][..., ::-1]
    if crop_pad:
        padded = np.pad(out, ((0, 0), (0, 0), (crop_pad, crop_pad), (crop_pad, crop_pad)))
        offs = rng.integers(0, 2 * crop_pad + 1, size=(n, 2))
        for i, (dy, dx) in enumerate(offs):
            out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out
