"""Evaluation metrics."""

from __future__ import annotations

import math

import numpy as np

from .errors import EmptyInput, InvalidProbability


def _check_simplex(probs):
    probs = np.asarray(probs, dtype=float)
    if probs.ndim != 2 or len(probs) == 0:
        raise InvalidProbability(f"expected a non-empty (n, classes) array, got shape {probs.shape}")
    if np.any(probs < -1e-12) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6):
        raise InvalidProbability("rows must be nonnegative and sum to one")
    return np.clip(probs, 0.0, 1.0)


def nll_categorical(probs, labels):
    probs = _check_simplex(probs)
    labels = np.asarray(labels, dtype=int)
    p = probs[np.arange(len(labels)), labels]
    with np.errstate(divide="ignore"):
        return float(-np.mean(np.log(p)))


def nll_gaussian(mean, std, targets):
    mean, std, targets = (np.asarray(a, dtype=float) for a in (mean, std, targets))
    if np.any(std <= 0):
        raise ValueError("predictive std must be positive")
    z = (targets - mean) / std
    return float(np.mean(0.5 * z * z + np.log(std) + 0.5 * math.log(2 * math.pi)))


def nll(pred, targets, std=None):
    """Categorical NLL for probability rows, Gaussian NLL when ``std`` is given."""
    if std is not None:
        return nll_gaussian(pred, std, targets)
    return nll_categorical(pred, targets)


def ece(probs, labels, n_bins=15):
    probs = _check_simplex(probs)
    labels = np.asarray(labels, dtype=int)
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(float)
    # bins are (lo, hi]; a confidence of exactly 0 joins the first bin
    idx = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    total = 0.0
    for b in range(n_bins):
        m = idx == b
        if np.any(m):
            total += m.mean() * abs(correct[m].mean() - conf[m].mean())
    return float(total)


def rmse(pred, targets):
    pred, targets = np.asarray(pred, dtype=float), np.asarray(targets, dtype=float)
    if pred.size == 0:
        raise EmptyInput("rmse of an empty array")
    return float(np.sqrt(np.mean((pred - targets) ** 2)))


def accuracy(probs, labels):
    return float(np.mean(np.asarray(probs).argmax(axis=1) == np.asarray(labels)))
