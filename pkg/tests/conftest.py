"""Shared test helpers: finite-difference probes and tiny instance builders."""

import numpy as np

from bana.clshead import ClassifierHead


def finite_difference_grad(loss_fn, weights: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of a scalar loss over a weight matrix."""
    grad = np.zeros_like(weights)
    it = np.nditer(weights, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        plus = weights.copy()
        minus = weights.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (loss_fn(plus) - loss_fn(minus)) / (2.0 * h)
        it.iternext()
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Elementwise |a - n| / max(1, |a|, |n|), reduced to the maximum."""
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max())


def random_head(rng: np.random.Generator, num_classes: int, dim: int, mode: str) -> ClassifierHead:
    w = rng.normal(0.0, 1.0, size=(num_classes + 1, dim))
    return ClassifierHead(weights=w, mode=mode, scale=7.5)
