"""Small numerical helpers: finite-difference stencils and log-log fits."""

from __future__ import annotations

import numpy as np

# Richardson-extrapolated central difference written as one 4-point stencil:
# f'(x) ~ [f(x-h) - 8 f(x-h/2) + 8 f(x+h/2) - f(x+h)] / (6h)
RICHARDSON_OFFSETS = np.array([-1.0, -0.5, 0.5, 1.0])
RICHARDSON_WEIGHTS = np.array([1.0, -8.0, 8.0, -1.0]) / 6.0


def fd_step(q: np.ndarray, rel: float) -> float:
    """Step ``rel * (1 + |q|)`` used by every coordinate derivative."""
    return float(rel * (1.0 + np.linalg.norm(q)))


def gradient_points(q: np.ndarray, h: float) -> np.ndarray:
    """Stencil points for :func:`gradient_from_values`, shape ``(K*4, K)``."""
    q = np.asarray(q, dtype=float)
    K = q.size
    pts = np.repeat(q[None, :], 4 * K, axis=0)
    for i in range(K):
        pts[4 * i:4 * i + 4, i] += h * RICHARDSON_OFFSETS
    return pts


def gradient_from_values(values: np.ndarray, h: float) -> np.ndarray:
    """Combine field values sampled at :func:`gradient_points` into a gradient.

    ``values`` has shape ``(K*4, ...)``; the result has shape ``(K, ...)`` with
    the derivative index first.
    """
    vals = np.asarray(values)
    K = vals.shape[0] // 4
    vals = vals.reshape((K, 4) + vals.shape[1:])
    return np.tensordot(RICHARDSON_WEIGHTS, vals, axes=([0], [1])) / h


def gradient(fun, q: np.ndarray, h: float) -> np.ndarray:
    """Richardson central-difference gradient of an array-valued ``fun``."""
    pts = gradient_points(q, h)
    return gradient_from_values(np.array([fun(p) for p in pts]), h)


def central_diff(fun, x: float, h: float):
    """Richardson central difference of a scalar-argument function."""
    vals = [fun(x + o * h) for o in RICHARDSON_OFFSETS]
    return sum(w * v for w, v in zip(RICHARDSON_WEIGHTS, vals)) / h


def loglog_slope(x, y) -> tuple[float, float]:
    """Least-squares slope and intercept of ``log y`` against ``log x``."""
    slope, intercept = np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)
    return float(slope), float(intercept)


def grid_derivative(values: np.ndarray, ds: float) -> np.ndarray:
    """Second-order derivative along axis 0 of uniformly sampled data.

    Central in the interior, one-sided second order at both ends.
    """
    return np.gradient(values, ds, axis=0, edge_order=2)
