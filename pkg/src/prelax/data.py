"""Datasets: synthetic texture corpora and the CIFAR binary format.

The synthetic corpora exist so training dynamics can be verified on a
single CPU in minutes. The default ``banded`` scheme is built so that
the interesting comparisons are meaningful at toy scale:

- the class signal is a global oriented cosine grating (orientation
  plus frequency band), which survives cropping and photometric
  augmentation and is linear in oriented band-energy features by
  construction;
- per-image nuisance (brightness level, pattern amplitude, color
  saturation, phase, and a couple of high-contrast clutter rectangles
  at random positions) dominates first-order pixel statistics, so an
  untrained feature extractor entangles it with the class signal while
  view-invariance training suppresses it, the clutter in particular
  because random crops include it inconsistently;
- a fixed vertical luminance ramp makes the four quarter-turn
  rotations of any image photometrically distinct, so rotation is
  learnable from pooled convolutional features.

The older ``gratings`` scheme (two-axis gratings, strong class means)
is kept for quick linear-sanity runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np


class DatasetParseError(ValueError):
    """Raised for malformed dataset files."""


@dataclass
class LabeledDataset:
    """Images with integer class labels.

    ``images`` has shape (N, 3, H, W), float32 in [0, 1]; ``labels``
    has shape (N,) with values in [0, class_count).
    """

    images: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"images must have shape (N, 3, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match {self.images.shape[0]} images"
            )
        if self.class_count < 1:
            raise ValueError(f"class_count must be positive, got {self.class_count}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(
                f"labels must lie in [0, {self.class_count}), got range "
                f"{self.labels.min()}..{self.labels.max()}"
            )

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_size(self) -> int:
        return self.images.shape[-1]

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel mean and standard deviation over all pixels."""
        mean = self.images.mean(axis=(0, 2, 3))
        std = self.images.std(axis=(0, 2, 3))
        return mean.astype(np.float32), np.maximum(std, 1e-6).astype(np.float32)


# Frequency pairs (cycles along x, cycles along y) per class. Pairs are
# chosen so no class is the axis swap of another; a quarter turn of one
# class therefore never mimics a different class.
_FREQ_PAIRS = ((2, 5), (3, 7), (4, 6), (5, 8), (2, 7), (3, 6), (4, 8), (6, 9))

_RAMP_AMPLITUDE = 0.12
_BASE_AMPLITUDE = 0.14
_AMP_JITTER = (0.6, 1.4)

# banded scheme: class = (orientation degrees, cycles across the image).
# Frequencies 3 and 8 stay separated under the <= sqrt(2) rescaling a
# 0.5-area crop introduces; orientations are 45 degrees apart.
_BANDED_CLASSES = (
    (0.0, 3.0), (45.0, 8.0), (90.0, 3.0), (135.0, 8.0),
    (0.0, 8.0), (45.0, 3.0), (90.0, 8.0), (135.0, 3.0),
)
_BANDED_AMPLITUDE = 0.18
_BANDED_AMP_JITTER = (0.5, 1.5)
_BANDED_BASE = (0.35, 0.65)
_BANDED_RAMP = 0.50
_CLUTTER_COUNT = 2
_CLUTTER_OFFSET = (0.2, 0.5)
# fixed saturated color direction the per-image saturation blends toward
_HUE_DIRECTION = (0.82, 0.12, -0.55)

SYNTHETIC_SCHEMES = ("banded", "gratings")


def _class_patterns(K: int, size: int) -> np.ndarray:
    """Noise-free class templates, shape (K, 3, size, size)."""
    c = (size - 1) / 2.0
    xs = (np.arange(size) - c) / size
    ys = (np.arange(size) - c) / size
    cos_x = {f: np.cos(2.0 * np.pi * f * xs)[None, :] for f in {p[0] for p in _FREQ_PAIRS[:K]}}
    cos_y = {f: np.cos(2.0 * np.pi * f * ys)[:, None] for f in {p[1] for p in _FREQ_PAIRS[:K]}}
    ramp = _RAMP_AMPLITUDE * (xs[None, :] + 0.5 * ys[:, None])
    out = np.empty((K, 3, size, size), dtype=np.float64)
    for k in range(K):
        fx, fy = _FREQ_PAIRS[k]
        for ch in range(3):
            # mild per-class channel weighting keeps color jitter informative
            amp = _BASE_AMPLITUDE * (1.0 + 0.3 * np.cos(2.0 * np.pi * (3 * k + ch) / 12.0))
            out[k, ch] = 0.5 + amp * (cos_x[fx] + cos_y[fy]) + ramp
    return out


def _gratings_dataset(n: int, K: int, size: int, rng: np.random.Generator, noise: float) -> LabeledDataset:
    patterns = _class_patterns(K, size)
    labels = np.tile(np.arange(K, dtype=np.int64), n // K)
    rng.shuffle(labels)
    centered = patterns[labels] - 0.5
    if noise > 0:
        amps = rng.uniform(*_AMP_JITTER, size=(n, 1, 1, 1))
        images = 0.5 + amps * centered + noise * rng.standard_normal(centered.shape)
    else:
        images = 0.5 + centered
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    return LabeledDataset(images=images, labels=labels, class_count=K)


def _banded_dataset(n: int, K: int, size: int, rng: np.random.Generator, noise: float) -> LabeledDataset:
    images = np.zeros((n, 3, size, size), dtype=np.float32)
    labels = np.zeros(n, dtype=np.int64)
    coords = (np.arange(size) + 0.5) / size
    u = np.broadcast_to(coords[None, :], (size, size))
    v = np.broadcast_to(coords[:, None], (size, size))
    ramp = _BANDED_RAMP * (v - 0.5)
    gray = np.ones(3) / np.sqrt(3.0)
    hue = np.asarray(_HUE_DIRECTION)
    hue = hue / np.linalg.norm(hue)
    clutter_lo = max(2, size // 4)
    clutter_hi = max(clutter_lo, size // 2)
    for i in range(n):
        k = i % K
        orientation, freq = _BANDED_CLASSES[k]
        theta = np.deg2rad(orientation)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        pattern = np.cos(2.0 * np.pi * freq * (u * np.cos(theta) + v * np.sin(theta)) + phase)
        amp = _BANDED_AMPLITUDE * rng.uniform(*_BANDED_AMP_JITTER)
        sat = rng.uniform(0.0, 1.0)
        color = (1.0 - sat) * gray + sat * hue
        base = rng.uniform(*_BANDED_BASE)
        img = np.zeros((3, size, size))
        for ch in range(3):
            img[ch] = base + amp * color[ch] * pattern + ramp
        for _ in range(_CLUTTER_COUNT):
            h = int(rng.integers(clutter_lo, clutter_hi + 1))
            w = int(rng.integers(clutter_lo, clutter_hi + 1))
            top = int(rng.integers(0, size - h + 1))
            left = int(rng.integers(0, size - w + 1))
            offset = rng.uniform(*_CLUTTER_OFFSET) * rng.choice([-1.0, 1.0], size=3)
            img[:, top:top + h, left:left + w] += offset[:, None, None]
        if noise > 0:
            img = img + noise * rng.standard_normal((3, size, size))
        images[i] = img
        labels[i] = k
    np.clip(images, 0.0, 1.0, out=images)
    order = rng.permutation(n)
    return LabeledDataset(images=images[order], labels=labels[order], class_count=K)


def synthetic_dataset(
    n: int,
    K: int,
    size: int,
    rng: Optional[np.random.Generator] = None,
    scheme: str = "banded",
    noise: float = 0.1,
) -> LabeledDataset:
    """Balanced synthetic dataset of ``n`` texture images in ``K`` classes.

    ``n`` must be divisible by ``K``; ``rng=None`` uses a fixed seed, so
    the default corpus is the same on every call. The ``banded`` scheme
    is described in the module docstring. In the ``gratings`` scheme,
    ``noise=0`` also disables amplitude jitter, making every image of a
    class identical.
    """
    if scheme not in SYNTHETIC_SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}, known: {SYNTHETIC_SCHEMES}")
    limit = len(_BANDED_CLASSES) if scheme == "banded" else len(_FREQ_PAIRS)
    if K < 2 or K > limit:
        raise ValueError(f"K must lie in [2, {limit}], got {K}")
    if n < K or n % K != 0:
        raise ValueError(f"n must be a positive multiple of K, got n={n}, K={K}")
    if noise < 0:
        raise ValueError(f"noise must be >= 0, got {noise}")
    if size < 8:
        raise ValueError(f"size must be at least 8, got {size}")
    if rng is None:
        rng = np.random.default_rng(0)
    if scheme == "banded":
        return _banded_dataset(n, K, size, rng, noise)
    return _gratings_dataset(n, K, size, rng, noise)


_CIFAR_RECORD = 3073
_CIFAR_SIDE = 32
_CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
_CIFAR_TEST_FILES = ("test_batch.bin",)
_CIFAR_RECORDS_PER_FILE = 10000


def _parse_cifar_records(raw: bytes, source: str, class_count: int) -> tuple[np.ndarray, np.ndarray]:
    n, rem = divmod(len(raw), _CIFAR_RECORD)
    if rem != 0:
        raise DatasetParseError(
            f"{source}: truncated record at byte offset {n * _CIFAR_RECORD} "
            f"({rem} trailing bytes, record size is {_CIFAR_RECORD})"
        )
    if n == 0:
        raise DatasetParseError(f"{source}: no records (file is empty)")
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(n, _CIFAR_RECORD)
    labels = rows[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= class_count)[0]
    if bad.size:
        i = int(bad[0])
        raise DatasetParseError(
            f"{source}: label {labels[i]} out of range [0, {class_count}) in record {i} "
            f"at byte offset {i * _CIFAR_RECORD}"
        )
    images = rows[:, 1:].reshape(n, 3, _CIFAR_SIDE, _CIFAR_SIDE).astype(np.float32) / 255.0
    return images, labels


def load_cifar_binary(path: str | Path, split: str = "train", class_count: int = 10) -> LabeledDataset:
    """Read images in the CIFAR binary layout.

    Each record is one label byte followed by 3072 pixel bytes (three
    32x32 planes in R, G, B order). ``path`` may be a directory holding
    the standard batch files, in which case ``split`` selects them and
    the conventional record counts are enforced, or a single ``.bin``
    file, which is parsed as-is.
    """
    path = Path(path)
    if path.is_dir():
        if split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {split!r}")
        names = _CIFAR_TRAIN_FILES if split == "train" else _CIFAR_TEST_FILES
        parts = []
        for name in names:
            f = path / name
            if not f.is_file():
                raise DatasetParseError(f"{f}: missing batch file for split {split!r}")
            imgs, labs = _parse_cifar_records(f.read_bytes(), str(f), class_count)
            if len(labs) != _CIFAR_RECORDS_PER_FILE:
                raise DatasetParseError(
                    f"{f}: expected {_CIFAR_RECORDS_PER_FILE} records, found {len(labs)}"
                )
            parts.append((imgs, labs))
        images = np.concatenate([p[0] for p in parts])
        labels = np.concatenate([p[1] for p in parts])
    else:
        if not path.is_file():
            raise DatasetParseError(f"{path}: not found")
        images, labels = _parse_cifar_records(path.read_bytes(), str(path), class_count)
    return LabeledDataset(images=images, labels=labels, class_count=class_count)


def save_cifar_binary(dataset: LabeledDataset, path: str | Path) -> Path:
    """Write a dataset in the CIFAR binary record layout (quantizes to bytes)."""
    if dataset.images.shape[-2:] != (_CIFAR_SIDE, _CIFAR_SIDE):
        raise ValueError(f"CIFAR layout requires 32x32 images, got {dataset.images.shape[-2:]}")
    path = Path(path)
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    rows = np.concatenate(
        [dataset.labels.astype(np.uint8)[:, None], pixels.reshape(len(dataset), -1)], axis=1
    )
    path.write_bytes(rows.tobytes())
    return path
