"""Dataset ingestion: procedural synthetic images for desk-scale runs,
the CIFAR-10 binary format, deterministic augmentation and split helpers.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

# per-channel normalization constants for CIFAR-10 (RGB, pixel scale 0..1)
CIFAR10_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR10_STD = np.array([0.2470, 0.2435, 0.2616])

RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes


class DatasetError(ValueError):
    """Malformed dataset input."""


@dataclass
class DatasetSplit:
    images: np.ndarray  # (N, 3, H, W) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int
    role: str = "train"

    def __len__(self):
        return len(self.labels)

    def batch(self, indices) -> Tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(list(indices), dtype=np.int64)
        return self.images[idx], self.labels[idx]

    def subset(self, indices, role: Optional[str] = None) -> "DatasetSplit":
        idx = np.asarray(list(indices), dtype=np.int64)
        return DatasetSplit(
            images=self.images[idx],
            labels=self.labels[idx],
            num_classes=self.num_classes,
            role=role or self.role,
        )

    def split(self, fraction: float, seed: int) -> Tuple["DatasetSplit", "DatasetSplit"]:
        """Disjoint shuffled split: (first `fraction`, remainder)."""
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self))
        cut = int(round(fraction * len(self)))
        return self.subset(order[:cut], "d1"), self.subset(order[cut:], "d2")


@dataclass
class AugmentationConfig:
    enabled: bool = False
    flip_prob: float = 0.5
    crop_padding: int = 2
    cutout_length: int = 0


# -- synthetic data --------------------------------------------------------


def _pattern(cls: int, res: int, phase: float, tilt: float) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res].astype(float) / res
    freq = 3.0
    kind = cls % 4
    if kind == 0:  # horizontal bars
        base = np.sin(2 * np.pi * (freq * yy + phase))
    elif kind == 1:  # vertical bars
        base = np.sin(2 * np.pi * (freq * xx + phase))
    elif kind == 2:  # diagonal stripes
        base = np.sin(2 * np.pi * (freq * (xx + yy) / np.sqrt(2) + phase))
    else:  # centered disk / ring
        r = np.hypot(xx - 0.5 - 0.2 * tilt, yy - 0.5 + 0.2 * tilt)
        base = np.cos(2 * np.pi * freq * r + 2 * np.pi * phase)
    return base


def generate_synthetic(
    num_classes: int, samples_per_class: int, resolution: int, seed: int
) -> DatasetSplit:
    """Class-conditional oriented bars / rings with noise and a mild color
    cue, easy enough for a small convnet to fit quickly.  Deterministic per
    seed; exactly ``samples_per_class`` examples of each class."""
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    rng = np.random.default_rng(seed)
    n = num_classes * samples_per_class
    images = np.empty((n, 3, resolution, resolution))
    labels = np.empty(n, dtype=np.int64)
    idx = 0
    for cls in range(num_classes):
        # per-class channel emphasis gives a secondary color cue
        color = 0.6 + 0.8 * np.eye(3)[cls % 3] if num_classes > 1 else np.ones(3)
        for _ in range(samples_per_class):
            phase = rng.uniform(0, 1)
            tilt = rng.uniform(-1, 1)
            base = _pattern(cls, resolution, phase, tilt)
            noise = rng.normal(0.0, 0.3, size=(3, resolution, resolution))
            images[idx] = color[:, None, None] * base[None, :, :] + noise
            labels[idx] = cls
            idx += 1
    order = rng.permutation(n)
    return DatasetSplit(
        images=images[order], labels=labels[order], num_classes=num_classes
    )


# -- CIFAR-10 binary -------------------------------------------------------


def _parse_cifar_file(path: str) -> Tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % RECORD_BYTES != 0:
        raise DatasetError(
            f"{path}: size {raw.size} is not a multiple of the {RECORD_BYTES}-byte "
            f"record length (remainder {raw.size % RECORD_BYTES} bytes)"
        )
    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= 10)[0]
    if bad.size:
        i = int(bad[0])
        raise DatasetError(
            f"{path}: label {labels[i]} >= 10 in record {i} (byte offset {i * RECORD_BYTES})"
        )
    # channel-major R, G, B planes of 32x32
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return pixels, labels


def load_cifar10_binary(path: str) -> DatasetSplit:
    """Parse one .bin file or every *.bin in a directory, normalized by the
    per-channel constants above."""
    if os.path.isdir(path):
        files = sorted(
            os.path.join(path, f) for f in os.listdir(path) if f.endswith(".bin")
        )
        if not files:
            raise DatasetError(f"{path}: no .bin files found")
    else:
        if not os.path.exists(path):
            raise DatasetError(f"{path}: no such file")
        files = [path]
    images, labels = zip(*(_parse_cifar_file(f) for f in files))
    pixels = np.concatenate(images)
    pixels = (pixels - CIFAR10_MEAN[None, :, None, None]) / CIFAR10_STD[None, :, None, None]
    return DatasetSplit(
        images=pixels, labels=np.concatenate(labels), num_classes=10
    )


# -- augmentation ----------------------------------------------------------


def augment(image: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Flip / padded random crop / cutout for a single (3, H, W) image."""
    if not cfg.enabled:
        return image
    _, h, w = image.shape
    if cfg.cutout_length > min(h, w):
        raise ValueError(
            f"cutout_length {cfg.cutout_length} exceeds image side {min(h, w)}"
        )
    out = image
    if cfg.flip_prob > 0 and rng.uniform() < cfg.flip_prob:
        out = out[:, :, ::-1]
    if cfg.crop_padding > 0:
        p = cfg.crop_padding
        padded = np.pad(out, ((0, 0), (p, p), (p, p)))
        dy, dx = rng.integers(0, 2 * p + 1, size=2)
        out = padded[:, dy : dy + h, dx : dx + w]
    if cfg.cutout_length > 0:
        s = cfg.cutout_length
        cy, cx = rng.integers(0, h), rng.integers(0, w)
        y0, y1 = max(0, cy - s // 2), min(h, cy - s // 2 + s)
        x0, x1 = max(0, cx - s // 2), min(w, cx - s // 2 + s)
        out = out.copy()
        out[:, y0:y1, x0:x1] = 0.0
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    if not cfg.enabled:
        return images
    return np.stack([augment(img, cfg, rng) for img in images])
