"""Synthetic three-phase volumes: a matrix background, bright rods standing
in for fibers, and dark blobs standing in for porosity, with per-voxel gray
noise.  Used by the test suite, the acceptance criteria, and the demos.
"""

from __future__ import annotations

import numpy as np

from .layers import make_rng
from .volume_io import GrayVolume

MATRIX, FIBER, POROSITY = 0, 1, 2


def _grid(shape):
    z, y, x = np.meshgrid(*(np.arange(n, dtype=np.float32) for n in shape), indexing="ij")
    return z, y, x


def _paint_rods(labels, rng, n_rods, radius_range):
    """Rods roughly along z with a random tilt; constant circular section."""
    depth, ny, nx = labels.shape
    z, y, x = _grid(labels.shape)
    for _ in range(n_rods):
        cy, cx = rng.uniform(0.1 * ny, 0.9 * ny), rng.uniform(0.1 * nx, 0.9 * nx)
        # small tilt: lateral drift per unit z
        ty, tx = rng.uniform(-0.1, 0.1, size=2)
        r = rng.uniform(*radius_range)
        dy = y - (cy + ty * z)
        dx = x - (cx + tx * z)
        labels[dy * dy + dx * dx < r * r] = FIBER


def _paint_blobs(labels, rng, n_blobs, radius_range):
    depth, ny, nx = labels.shape
    z, y, x = _grid(labels.shape)
    for _ in range(n_blobs):
        # centers span the full depth so every z region carries porosity
        cz = rng.uniform(0.05 * depth, 0.95 * depth)
        cy = rng.uniform(0.1 * ny, 0.9 * ny)
        cx = rng.uniform(0.1 * nx, 0.9 * nx)
        r = rng.uniform(*radius_range)
        d2 = (z - cz) ** 2 + (y - cy) ** 2 + (x - cx) ** 2
        labels[d2 < r * r] = POROSITY


def three_phase_volume(shape=(64, 64, 64), seed=0, n_rods=9, rod_radius=(5.5, 7.5),
                       n_blobs=12, blob_radius=(4.5, 8.0),
                       gray_means=(120.0, 190.0, 60.0), gray_std=20.0):
    """Gray volume + labels with overlapping class gray histograms.

    The class means sit a few noise standard deviations apart, so a
    gray-value-only classifier is measurably imperfect while spatial context
    separates the phases cleanly.
    """
    rng = make_rng(seed)
    labels = np.zeros(shape, dtype=np.uint8)
    _paint_rods(labels, rng, n_rods, rod_radius)
    _paint_blobs(labels, rng, n_blobs, blob_radius)  # porosity wins overlaps
    means = np.asarray(gray_means, dtype=np.float32)[labels]
    gray = means + rng.normal(0.0, gray_std, size=shape).astype(np.float32)
    raw = np.clip(np.rint(gray), 0, 255).astype(np.uint8)
    return GrayVolume(raw), labels


def separable_phase_volume(shape=(48, 48, 48), seed=0, n_rods=5, rod_radius=(4.0, 6.0),
                           n_blobs=6, blob_radius=(4.0, 7.0)):
    """Same geometry but with disjoint per-class gray ranges, so the
    per-gray-value majority baseline is exact and a model can overfit fast.

    Ranges: matrix [90, 130], fiber [180, 220], porosity [20, 60].
    """
    rng = make_rng(seed)
    labels = np.zeros(shape, dtype=np.uint8)
    _paint_rods(labels, rng, n_rods, rod_radius)
    _paint_blobs(labels, rng, n_blobs, blob_radius)
    low = np.asarray([90, 180, 20], dtype=np.float32)[labels]
    raw = (low + rng.random(shape).astype(np.float32) * 40.0).astype(np.uint8)
    return GrayVolume(raw), labels
