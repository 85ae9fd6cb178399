"""Central finite differences for checking analytic gradients."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np


def numerical_grad(fn: Callable[[], float], array: np.ndarray, indices: Iterable[tuple] | None = None,
                   step: float = 1e-5) -> np.ndarray:
    """d fn / d array by central differences, perturbing ``array`` in place.

    Only ``indices`` are evaluated when given; other entries stay zero.
    """
    grad = np.zeros(array.shape, dtype=np.float64)
    if indices is None:
        indices = np.ndindex(array.shape)
    for idx in indices:
        orig = array[idx]
        array[idx] = orig + step
        up = float(fn())
        array[idx] = orig - step
        down = float(fn())
        array[idx] = orig
        grad[idx] = (up - down) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor * max|n|).

    The floor keeps entries that are negligible next to the largest gradient
    component from dominating through 0/0-style ratios.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(n), initial=0.0)), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
    return float(np.max(np.abs(a - n) / denom, initial=0.0))


def sample_indices(shape: tuple[int, ...], count: int, rng: np.random.Generator) -> list[tuple]:
    total = int(np.prod(shape))
    flat = rng.choice(total, size=min(count, total), replace=False)
    return [np.unravel_index(i, shape) for i in flat]
