"""Synthetic 28x28 digit-style glyphs for offline smoke experiments.

Ten classes of segment-based glyphs with per-example jitter (shift, rotation,
stroke thickness, contrast, pixel noise), written through the real IDX files
so the whole ingestion path is exercised.  Not a benchmark; a stand-in that
lets the full pipeline run end to end on machines without the real datasets.
"""

from __future__ import annotations

import os

import numpy as np
from scipy import ndimage

from . import dataio

# segment endpoints on a unit box (row, col), one tuple list per digit;
# roughly seven-segment shapes with a few diagonals for variety
_SEGMENTS = {
    0: [((0.1, 0.2), (0.1, 0.8)), ((0.9, 0.2), (0.9, 0.8)), ((0.1, 0.2), (0.9, 0.2)), ((0.1, 0.8), (0.9, 0.8))],
    1: [((0.1, 0.55), (0.9, 0.55)), ((0.1, 0.55), (0.3, 0.3))],
    2: [((0.1, 0.2), (0.1, 0.8)), ((0.1, 0.8), (0.5, 0.8)), ((0.5, 0.2), (0.5, 0.8)), ((0.5, 0.2), (0.9, 0.2)), ((0.9, 0.2), (0.9, 0.8))],
    3: [((0.1, 0.2), (0.1, 0.8)), ((0.5, 0.3), (0.5, 0.8)), ((0.9, 0.2), (0.9, 0.8)), ((0.1, 0.8), (0.9, 0.8))],
    4: [((0.1, 0.2), (0.5, 0.2)), ((0.5, 0.2), (0.5, 0.8)), ((0.1, 0.8), (0.9, 0.8))],
    5: [((0.1, 0.2), (0.1, 0.8)), ((0.1, 0.2), (0.5, 0.2)), ((0.5, 0.2), (0.5, 0.8)), ((0.5, 0.8), (0.9, 0.8)), ((0.9, 0.2), (0.9, 0.8))],
    6: [((0.1, 0.2), (0.9, 0.2)), ((0.5, 0.2), (0.5, 0.8)), ((0.9, 0.2), (0.9, 0.8)), ((0.5, 0.8), (0.9, 0.8))],
    7: [((0.1, 0.2), (0.1, 0.8)), ((0.1, 0.8), (0.9, 0.35))],
    8: [((0.1, 0.2), (0.1, 0.8)), ((0.5, 0.2), (0.5, 0.8)), ((0.9, 0.2), (0.9, 0.8)), ((0.1, 0.2), (0.9, 0.2)), ((0.1, 0.8), (0.9, 0.8))],
    9: [((0.1, 0.2), (0.1, 0.8)), ((0.1, 0.2), (0.5, 0.2)), ((0.5, 0.2), (0.5, 0.8)), ((0.1, 0.8), (0.9, 0.8))],
}


def _draw_glyph(digit: int, size: int = 28, inset: int = 5) -> np.ndarray:
    canvas = np.zeros((size, size), dtype=np.float32)
    span = size - 2 * inset
    for (r0, c0), (r1, c1) in _SEGMENTS[digit]:
        n = 3 * size
        rows = inset + (r0 + (r1 - r0) * np.linspace(0, 1, n)) * span
        cols = inset + (c0 + (c1 - c0) * np.linspace(0, 1, n)) * span
        canvas[np.clip(rows.round().astype(int), 0, size - 1),
               np.clip(cols.round().astype(int), 0, size - 1)] = 1.0
    return canvas


def make_digits(n: int, seed: int, size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """n jittered glyph images (uint8 [n, size, size]) and labels."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x91F)))
    base = {d: _draw_glyph(d, size) for d in range(10)}
    labels = rng.integers(0, 10, size=n)
    images = np.empty((n, size, size), dtype=np.uint8)
    for i, digit in enumerate(labels):
        img = base[int(digit)]
        angle = rng.uniform(-10.0, 10.0)
        img = ndimage.rotate(img, angle, reshape=False, order=1, mode="constant")
        sigma = rng.uniform(0.6, 1.0)
        img = ndimage.gaussian_filter(img, sigma)
        peak = img.max()
        if peak > 0:
            img = img / peak
        dy, dx = rng.integers(-2, 3, size=2)
        img = np.roll(np.roll(img, dy, axis=0), dx, axis=1)
        img = img * rng.uniform(0.75, 1.0) + rng.normal(0.0, 0.03, img.shape)
        images[i] = (np.clip(img, 0.0, 1.0) * 255).round().astype(np.uint8)
    return images, labels.astype(np.uint8)


def write_digit_dataset(data_dir: str, n_train: int, n_val: int, seed: int = 0):
    """Write IDX train/val files shaped like the MNIST distribution layout."""
    os.makedirs(data_dir, exist_ok=True)
    train_images, train_labels = make_digits(n_train, seed)
    val_images, val_labels = make_digits(n_val, seed + 1)
    dataio.write_idx_images(os.path.join(data_dir, dataio.MNIST_FILES["train_images"]), train_images)
    dataio.write_idx_labels(os.path.join(data_dir, dataio.MNIST_FILES["train_labels"]), train_labels)
    dataio.write_idx_images(os.path.join(data_dir, dataio.MNIST_FILES["val_images"]), val_images)
    dataio.write_idx_labels(os.path.join(data_dir, dataio.MNIST_FILES["val_labels"]), val_labels)
