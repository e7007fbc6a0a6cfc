"""Central finite differences, used as an independent check on backward()."""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np


def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    h: float = 1e-5,
    indices: Iterable[tuple[int, ...]] | None = None,
) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences in float64.

    ``f`` receives a float64 copy of ``x`` with one coordinate perturbed. When
    ``indices`` is given only those coordinates are probed; the rest of the
    returned array is NaN.
    """
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    x = np.array(x, dtype=np.float64)
    grad = np.full(x.shape, np.nan) if indices is not None else np.zeros(x.shape)
    probe = np.ndindex(*x.shape) if indices is None else indices
    for idx in probe:
        orig = x[idx]
        x[idx] = orig + h
        fp = float(f(x))
        x[idx] = orig - h
        fm = float(f(x))
        x[idx] = orig
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)`` over finite entries."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def piecewise_safe_grad(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    indices: Iterable[tuple[int, ...]],
    h: float = 1e-6,
    fine: float = 1e-7,
    agree: float = 1e-5,
) -> np.ndarray:
    """Central differences that step around activation kinks.

    A network of leaky ReLUs and max pools is piecewise smooth, and with many
    units a step of ``h`` can cross a kink. Each coordinate is probed at ``h``
    and ``2h``; if those disagree a kink sits inside the step and the
    coordinate is re-probed at ``fine``. The analytic gradient is never
    consulted.
    """
    indices = [tuple(i) for i in indices]
    d1 = finite_diff_grad(f, x, h, indices)
    d2 = finite_diff_grad(f, x, 2 * h, indices)
    redo = [i for i in indices if abs(d1[i] - d2[i]) > agree * max(abs(d1[i]), 1.0)]
    if redo:
        d3 = finite_diff_grad(f, x, fine, redo)
        for i in redo:
            d1[i] = d3[i]
    return d1
