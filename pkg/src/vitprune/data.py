"""Datasets: the CIFAR-10 binary format and seeded synthetic images."""
from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
CIFAR_RECORD = 1 + 3 * 32 * 32


@dataclass(frozen=True)
class Dataset:
    """Standardized images (n, C, H, W) with integer labels.

    ``mean``/``std`` are the per-channel constants used to standardize
    pixels already scaled to [0, 1].
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    mean: tuple[float, ...]
    std: tuple[float, ...]
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, images=self.images[idx], labels=self.labels[idx])

    def subset_classes(self, classes: Sequence[int]) -> "Dataset":
        """Keep only ``classes``, relabelled 0..len(classes)-1 in the given order."""
        classes = [int(c) for c in classes]
        remap = np.full(self.num_classes, -1, dtype=np.int64)
        remap[classes] = np.arange(len(classes))
        keep = np.flatnonzero(remap[self.labels] >= 0)
        return replace(self, images=self.images[keep], labels=remap[self.labels[keep]],
                       num_classes=len(classes), name=f"{self.name}[{','.join(map(str, classes))}]")

    def split_at(self, n: int) -> tuple["Dataset", "Dataset"]:
        a = replace(self.take(np.arange(n)), split="train")
        b = replace(self.take(np.arange(n, len(self))), split="eval")
        return a, b


def _standardize(raw: np.ndarray, mean, std) -> np.ndarray:
    x = raw.astype(np.float64) / 255.0
    m = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    s = np.asarray(std, dtype=np.float64)[None, :, None, None]
    return (x - m) / s


def parse_cifar10_bytes(buf: bytes, source: str = "") -> tuple[np.ndarray, np.ndarray]:
    if len(buf) % CIFAR_RECORD:
        raise ValueError(f"{source or 'CIFAR-10 data'}: length {len(buf)} is not a multiple of {CIFAR_RECORD} (truncated file?)")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if len(labels) and labels.max() >= 10:
        bad = int(np.flatnonzero(labels >= 10)[0])
        raise ValueError(f"{source or 'CIFAR-10 data'}: record {bad} has label byte {labels[bad]} >= 10")
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10_bin(paths: str | os.PathLike | Sequence, split: str = "train") -> Dataset:
    """Read one or more CIFAR-10 binary batch files (1 label byte + 3072 pixel bytes per record)."""
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    raws, labels = [], []
    for p in paths:
        with open(p, "rb") as f:
            r, y = parse_cifar10_bytes(f.read(), str(p))
        raws.append(r)
        labels.append(y)
    raw = np.concatenate(raws)
    return Dataset(_standardize(raw, CIFAR_MEAN, CIFAR_STD), np.concatenate(labels), 10,
                   CIFAR_MEAN, CIFAR_STD, split, "cifar10")


def raw_pixels(ds: Dataset) -> np.ndarray:
    """Recover uint8 pixels from a standardized dataset."""
    m = np.asarray(ds.mean)[None, :, None, None]
    s = np.asarray(ds.std)[None, :, None, None]
    return np.clip(np.rint((ds.images * s + m) * 255.0), 0, 255).astype(np.uint8)


def write_cifar10_bin(path, pixels: np.ndarray, labels) -> None:
    """Write uint8 pixels (n, 3, 32, 32) and labels in the CIFAR-10 binary layout."""
    pixels = np.asarray(pixels)
    labels = np.asarray(labels)
    if pixels.dtype != np.uint8 or pixels.shape[1:] != (3, 32, 32):
        raise ValueError(f"expected uint8 pixels of shape (n, 3, 32, 32), got {pixels.dtype} {pixels.shape}")
    if len(labels) != len(pixels) or (len(labels) and (labels.min() < 0 or labels.max() >= 10)):
        raise ValueError("labels must match the images and lie in [0, 10)")
    rec = np.empty((len(pixels), CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = pixels.reshape(len(pixels), -1)
    with open(path, "wb") as f:
        f.write(rec.tobytes())


def synth_images(n: int, image_size, in_channels: int, seed: int) -> np.ndarray:
    if n < 1:
        raise ValueError("synthetic dataset needs n >= 1")
    h, w = (image_size, image_size) if isinstance(image_size, int) else image_size
    return np.random.default_rng(seed).standard_normal((n, in_channels, h, w))


def synth_dataset(n: int, image_size, in_channels: int, num_classes: int, seed: int = 0,
                  teacher=None, split: str = "train") -> Dataset:
    """Gaussian images; labels are uniform random or the teacher's argmax.

    Images are already standard normal, so the recorded constants are 0 and 1.
    """
    images = synth_images(n, image_size, in_channels, seed)
    if teacher is None:
        labels = np.random.default_rng([seed, 1]).integers(0, num_classes, size=n)
        name = "synth-random"
    else:
        from .model import predict_logits

        if teacher.spec.num_classes != num_classes:
            raise ValueError("teacher class count differs from num_classes")
        labels = predict_logits(teacher, images).argmax(axis=1)
        name = "synth-teacher"
    return Dataset(images, labels.astype(np.int64), num_classes, (0.0,) * in_channels,
                   (1.0,) * in_channels, split, name)
