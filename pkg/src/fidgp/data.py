"""Synthetic datasets: the two-cluster 1-D regression problem and a 2-D
two-blob classification set with a ring of out-of-distribution points."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLUSTERS = ((0.5, 0.8), (1.2, 1.6))
GRID = (0.0, 2.2)
NOISE_STD = 0.1


def true_function(x):
    return np.cos(4.0 * np.asarray(x, dtype=float) + 0.8)


@dataclass
class Regression1DDataset:
    x: np.ndarray
    y: np.ndarray
    split: str


def gen_regression1d(n_per_cluster=100, seed=42, n_grid=200):
    """Returns ``(train, test)``; the test split is a noiseless uniform grid."""
    if n_per_cluster < 1:
        raise ValueError("n_per_cluster must be at least 1")
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.uniform(lo, hi, n_per_cluster) for lo, hi in CLUSTERS])
    y = true_function(x) + NOISE_STD * rng.standard_normal(x.shape)
    grid = np.linspace(*GRID, n_grid)
    return Regression1DDataset(x, y, "train"), Regression1DDataset(grid, true_function(grid), "test")


def in_clusters(x):
    x = np.asarray(x)
    return np.logical_or.reduce([(x >= lo) & (x <= hi) for lo, hi in CLUSTERS])


def gap_region(x):
    """Points between and beyond the clusters with a margin around them."""
    x = np.asarray(x)
    return ((x >= 0.0) & (x <= 0.4)) | ((x >= 0.9) & (x <= 1.1)) | ((x >= 1.7) & (x <= 2.2))


@dataclass
class LabeledPoints:
    x: np.ndarray
    y: np.ndarray


CENTERS = np.array([[-1.5, 0.0], [1.5, 0.0]])
BLOB_STD = 0.5
RING_RADIUS = 6.0
RING_WIDTH = 0.2


def _blobs(n, rng):
    y = np.repeat([0, 1], [n // 2, n - n // 2])
    x = CENTERS[y] + BLOB_STD * rng.standard_normal((n, 2))
    perm = rng.permutation(n)
    return LabeledPoints(x[perm], y[perm])


def _ring(n, rng):
    theta = rng.uniform(0.0, 2 * np.pi, n)
    r = rng.uniform(RING_RADIUS - RING_WIDTH, RING_RADIUS + RING_WIDTH, n)
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def gen_toy_ood(seed=42, n_train=500, n_test=500, n_ood=500):
    """Returns ``(id_train, id_test, ood_test)``.  OoD points carry label -1."""
    rng = np.random.default_rng(seed)
    train = _blobs(n_train, rng)
    test = _blobs(n_test, rng)
    ood = LabeledPoints(_ring(n_ood, rng), np.full(n_ood, -1))
    return train, test, ood
