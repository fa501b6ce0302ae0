"""Synthetic planted-feature datasets for desk-scale runs and tests.

Class 1 images contain one bright square on a noisy background; class 0
images are background only. Each image draws its own background brightness
ceiling, so neither the global mean nor the pixel sum separates the classes:
a model has to respond to the locally bright square itself. The square
position is uniform over all placements that keep it inside the image, so a
detector must localize, not just threshold a fixed region.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imgpipe import Dataset, standardize

BACKGROUND_CEILING_LOW = 0.25
BACKGROUND_CEILING_HIGH = 0.9
SQUARE_VALUE = 1.0


@dataclass
class PlantedSquareData:
    dataset: Dataset
    positions: list[tuple[int, int] | None]  # top-left of the square, None for class 0


def planted_square_image(rng: np.random.Generator, size: int, square: int,
                         positive: bool,
                         quadrant_pure: bool = False) -> tuple[np.ndarray, tuple[int, int] | None]:
    """One image plus the square's top-left corner (None for negatives).

    With quadrant_pure, placements are restricted so the square lies entirely
    inside a single quadrant of the image.
    """
    ceiling = rng.uniform(BACKGROUND_CEILING_LOW, BACKGROUND_CEILING_HIGH)
    img = rng.uniform(0.0, ceiling, size=(size, size))
    if not positive:
        return img, None
    half = size // 2
    while True:
        y = int(rng.integers(0, size - square + 1))
        x = int(rng.integers(0, size - square + 1))
        if not quadrant_pure:
            break
        if (y + square <= half or y >= half) and (x + square <= half or x >= half):
            break
    img[y:y + square, x:x + square] = SQUARE_VALUE
    return img, (y, x)


def make_planted_square_dataset(count: int = 1200, size: int = 32, square: int = 8,
                                seed: int = 20240501) -> PlantedSquareData:
    """Balanced two-class dataset, already standardized and in shuffled order
    (so the positional 80/10/10 split applies directly)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = np.array([1] * (count // 2) + [0] * (count - count // 2), dtype=np.uint8)
    rng.shuffle(labels)
    images = np.empty((count, size, size), dtype=np.float64)
    positions: list[tuple[int, int] | None] = []
    for i in range(count):
        img, pos = planted_square_image(rng, size, square, bool(labels[i]))
        images[i] = img
        positions.append(pos)
    standardized, mean, stddev = standardize(images)
    dataset = Dataset(images=standardized, labels=labels, mean=mean, stddev=stddev)
    return PlantedSquareData(dataset=dataset, positions=positions)


def quadrant_of(position: tuple[int, int], square: int, size: int) -> tuple[int, int]:
    """(row, col) quadrant index of the square's center."""
    cy = position[0] + square / 2.0
    cx = position[1] + square / 2.0
    half = size / 2.0
    return (0 if cy < half else 1, 0 if cx < half else 1)
