"""X-ray-style image preprocessing and dataset packaging.

Pipeline stages, in order: resize to a fixed resolution, shift to a constant
mean, keep only mid-band intensities, extract and fill the surviving
contours into a mask, apply the mask, standardize the whole dataset to zero
mean and unit variance, then shuffle and split 80/10/10. Every stage is
deterministic; the split order is the stored order, so the file format needs
no split markers.
"""

from __future__ import annotations

import csv
import logging
import os
import random
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

DATASET_MAGIC = b"DNDS"
DATASET_VERSION = 1
TARGET_SIZE = (256, 256)

DEFAULT_TARGET_MEAN = 128.0
DEFAULT_BAND_LOW = 64.0
DEFAULT_BAND_HIGH = 192.0
DEFAULT_MIN_AREA_FRACTION = 0.01


class ZeroVarianceError(ValueError):
    """Dataset intensity variance is zero; cannot standardize."""


class ManifestError(ValueError):
    pass


@dataclass
class Dataset:
    """Images in split order: the first 80% are train, then 10% dev, 10% test."""

    images: np.ndarray  # (n, h, w) float32
    labels: np.ndarray  # (n,) uint8
    mean: float
    stddev: float

    def split_sizes(self) -> tuple[int, int, int]:
        n = len(self.labels)
        n_dev = n // 10
        n_test = n // 10
        return n - n_dev - n_test, n_dev, n_test

    def _bounds(self, part: str) -> tuple[int, int]:
        n_train, n_dev, n_test = self.split_sizes()
        return {
            "train": (0, n_train),
            "dev": (n_train, n_train + n_dev),
            "test": (n_train + n_dev, n_train + n_dev + n_test),
        }[part]

    def part(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self._bounds(name)
        return self.images[lo:hi], self.labels[lo:hi]

    @property
    def train_images(self):
        return self.part("train")[0]

    @property
    def train_labels(self):
        return self.part("train")[1]

    @property
    def dev_images(self):
        return self.part("dev")[0]

    @property
    def dev_labels(self):
        return self.part("dev")[1]

    @property
    def test_images(self):
        return self.part("test")[0]

    @property
    def test_labels(self):
        return self.part("test")[1]


@dataclass
class DatasetSplit:
    """Explicit train/dev/test views plus the normalization stats."""

    train: list
    dev: list
    test: list
    mean: float
    stddev: float


# ---------------------------------------------------------------------------
# Per-image stages


def resize(img: np.ndarray, target: tuple[int, int] = TARGET_SIZE) -> np.ndarray:
    """Bilinear resample to (height, width) with half-pixel-center mapping.

    Identity when the image is already the target size.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    th, tw = target
    sy = np.clip((np.arange(th) + 0.5) * (h / th) - 0.5, 0.0, h - 1.0)
    sx = np.clip((np.arange(tw) + 0.5) * (w / tw) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0)[:, None]
    wx = (sx - x0)[None, :]
    top = img[np.ix_(y0, x0)] * (1 - wx) + img[np.ix_(y0, x1)] * wx
    bottom = img[np.ix_(y1, x0)] * (1 - wx) + img[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bottom * wy


def mean_shift(img: np.ndarray, target_mean: float = DEFAULT_TARGET_MEAN) -> np.ndarray:
    """Shift every pixel so the image mean lands at target_mean, clamped to [0, 255]."""
    img = np.asarray(img, dtype=np.float64)
    return np.clip(img + (target_mean - img.mean()), 0.0, 255.0)


def band_filter(img: np.ndarray, low: float = DEFAULT_BAND_LOW,
                high: float = DEFAULT_BAND_HIGH) -> np.ndarray:
    """Mask of pixels whose intensity lies inside [low, high]."""
    img = np.asarray(img)
    return (img >= low) & (img <= high)


_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def contour_fill(mask: np.ndarray,
                 min_area_fraction: float = DEFAULT_MIN_AREA_FRACTION) -> np.ndarray:
    """Keep 8-connected components of at least min_area_fraction of the image,
    fill each survivor's interior holes, and return their union.

    Falls back to an all-ones mask (with a warning) when nothing survives, so
    downstream masking degrades to a no-op instead of erasing the image.
    """
    mask = np.asarray(mask, dtype=bool)
    min_area = min_area_fraction * mask.size
    labels, count = ndimage.label(mask, structure=_EIGHT_CONNECTED)
    if count:
        sizes = np.bincount(labels.ravel())
        keep = [lab for lab in range(1, count + 1) if sizes[lab] >= min_area]
    else:
        keep = []
    if not keep:
        log.warning("contour fill found no usable component; masking disabled for this image")
        return np.ones_like(mask)
    out = np.zeros_like(mask)
    for lab in keep:
        out |= ndimage.binary_fill_holes(labels == lab)
    return out


def apply_mask(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img * mask


def preprocess_image(img: np.ndarray,
                     target: tuple[int, int] = TARGET_SIZE,
                     target_mean: float = DEFAULT_TARGET_MEAN,
                     band_low: float = DEFAULT_BAND_LOW,
                     band_high: float = DEFAULT_BAND_HIGH,
                     min_area_fraction: float = DEFAULT_MIN_AREA_FRACTION) -> np.ndarray:
    """All per-image stages: resize, mean shift, band filter, contour mask, apply."""
    resized = resize(img, target)
    shifted = mean_shift(resized, target_mean)
    band = band_filter(shifted, band_low, band_high)
    mask = contour_fill(band, min_area_fraction)
    return apply_mask(shifted, mask)


# ---------------------------------------------------------------------------
# Dataset-level stages


def standardize(images: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Rescale the whole dataset to zero mean and unit variance; the stats are
    returned for reuse at inference time."""
    images = np.asarray(images, dtype=np.float64)
    mean = float(images.mean())
    stddev = float(images.std())
    if stddev == 0.0 or not np.isfinite(stddev):
        raise ZeroVarianceError("dataset has zero intensity variance")
    return ((images - mean) / stddev).astype(np.float32), mean, stddev


def split(items: list, seed: int) -> DatasetSplit:
    """Deterministic shuffle then 80/10/10 split; flooring remainders go to train."""
    order = list(range(len(items)))
    random.Random(seed).shuffle(order)
    shuffled = [items[i] for i in order]
    n = len(items)
    n_dev = n // 10
    n_test = n // 10
    n_train = n - n_dev - n_test
    return DatasetSplit(
        train=shuffled[:n_train],
        dev=shuffled[n_train:n_train + n_dev],
        test=shuffled[n_train + n_dev:],
        mean=0.0,
        stddev=1.0,
    )


def shuffle_order(n: int, seed: int) -> list[int]:
    order = list(range(n))
    random.Random(seed).shuffle(order)
    return order


# ---------------------------------------------------------------------------
# File I/O


def load_manifest(path) -> list[tuple[str, int]]:
    """Read manifest.csv: a filename,label header then one row per image."""
    if not os.path.exists(path):
        raise ManifestError(f"manifest not found: {path}")
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip().lower() for c in header] != ["filename", "label"]:
            raise ManifestError(f"{path}: expected header 'filename,label'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2 or row[1].strip() not in ("0", "1"):
                raise ManifestError(f"{path}:{lineno}: expected 'filename,label' with label 0 or 1")
            rows.append((row[0].strip(), int(row[1])))
    if not rows:
        raise ManifestError(f"{path}: manifest lists no images")
    return rows


def load_gray_image(path) -> np.ndarray:
    """8-bit grayscale PNG or PGM file as a (h, w) uint8 array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def preprocess_directory(input_dir, manifest_path, seed: int,
                         target: tuple[int, int] = TARGET_SIZE,
                         target_mean: float = DEFAULT_TARGET_MEAN,
                         band_low: float = DEFAULT_BAND_LOW,
                         band_high: float = DEFAULT_BAND_HIGH,
                         min_area_fraction: float = DEFAULT_MIN_AREA_FRACTION) -> Dataset:
    """Run the full pipeline over a manifest of images: per-image stages,
    global standardization, then the seeded shuffle that defines the split."""
    entries = load_manifest(manifest_path)
    images = np.empty((len(entries), target[0], target[1]), dtype=np.float64)
    labels = np.empty(len(entries), dtype=np.uint8)
    for i, (name, label) in enumerate(entries):
        path = os.path.join(input_dir, name)
        if not os.path.exists(path):
            raise ManifestError(f"image listed in manifest not found: {path}")
        images[i] = preprocess_image(load_gray_image(path), target, target_mean,
                                     band_low, band_high, min_area_fraction)
        labels[i] = label
    standardized, mean, stddev = standardize(images)
    order = shuffle_order(len(entries), seed)
    return Dataset(images=standardized[order], labels=labels[order],
                   mean=mean, stddev=stddev)


def write_dataset(path, dataset: Dataset) -> None:
    """Binary dataset file: magic, version, count, image dims, normalization
    stats, then one label byte plus the float32 pixels per item."""
    n, h, w = dataset.images.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<H", DATASET_VERSION))
        fh.write(struct.pack("<I", n))
        fh.write(struct.pack("<HH", h, w))
        fh.write(struct.pack("<dd", dataset.mean, dataset.stddev))
        for i in range(n):
            fh.write(struct.pack("<B", int(dataset.labels[i])))
            fh.write(np.ascontiguousarray(dataset.images[i], dtype="<f4").tobytes())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != DATASET_MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != DATASET_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    (count,) = struct.unpack_from("<I", data, 6)
    h, w = struct.unpack_from("<HH", data, 10)
    mean, stddev = struct.unpack_from("<dd", data, 14)
    if count < 1:
        raise ValueError(f"{path}: dataset is empty")
    offset = 30
    item = 1 + 4 * h * w
    if len(data) != offset + count * item:
        raise ValueError(f"{path}: truncated dataset file")
    images = np.empty((count, h, w), dtype=np.float32)
    labels = np.empty(count, dtype=np.uint8)
    for i in range(count):
        labels[i] = data[offset]
        images[i] = np.frombuffer(data, dtype="<f4", count=h * w,
                                  offset=offset + 1).reshape(h, w)
        offset += item
    return Dataset(images=images, labels=labels, mean=mean, stddev=stddev)


def write_stats(path, mean: float, stddev: float) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"mean {mean!r}\n")
        fh.write(f"stddev {stddev!r}\n")
