"""Non-learning next-frame estimators.

All spline work is vectorized over pixels: a clip ``(..., T)`` is treated as
``prod(...)`` independent series sharing the same knots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

METHODS = ("copy", "extrapolate", "interpolate")


@dataclass
class NaturalSpline:
    """Piecewise cubic ``y = a + b*s + c*s**2 + d*s**3`` with ``s = t - knot[j]``.

    Coefficient arrays have shape ``(..., n - 1)``; ``m`` holds the second
    derivatives at the knots, shape ``(..., n)``.
    """

    knots: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray
    m: np.ndarray

    def __call__(self, t: float) -> np.ndarray:
        """Evaluate at scalar ``t``; outside the knot range the end piece is extended."""
        j = int(np.clip(np.searchsorted(self.knots, t, side="right") - 1, 0, len(self.knots) - 2))
        s = t - self.knots[j]
        return self.a[..., j] + s * (self.b[..., j] + s * (self.c[..., j] + s * self.d[..., j]))


def solve_tridiagonal(lower, diag, upper, rhs):
    """Thomas algorithm; ``rhs`` may carry leading batch axes, the matrix is shared."""
    n = len(diag)
    cp = np.empty(n)
    dp = np.empty(rhs.shape)
    cp[0] = upper[0] / diag[0] if n > 1 else 0.0
    dp[..., 0] = rhs[..., 0] / diag[0]
    for i in range(1, n):
        denom = diag[i] - lower[i - 1] * cp[i - 1]
        if i < n - 1:
            cp[i] = upper[i] / denom
        dp[..., i] = (rhs[..., i] - lower[i - 1] * dp[..., i - 1]) / denom
    x = np.empty(rhs.shape)
    x[..., -1] = dp[..., -1]
    for i in range(n - 2, -1, -1):
        x[..., i] = dp[..., i] - cp[i] * x[..., i + 1]
    return x


def spline_fit_natural(values, knots=None) -> NaturalSpline:
    """Natural cubic spline through ``values`` (last axis) at ``knots``.

    Knots default to ``0..n-1``. Two points give the straight line.
    """
    y = np.asarray(values, dtype=np.float64)
    n = y.shape[-1]
    if n < 2:
        raise ValueError(f"spline fitting needs at least 2 points, got {n}")
    x = np.arange(n, dtype=np.float64) if knots is None else np.asarray(knots, dtype=np.float64)
    if x.shape != (n,):
        raise ValueError(f"knots shape {x.shape} does not match {n} values")
    h = np.diff(x)
    if np.any(h <= 0):
        raise ValueError("knots must be strictly increasing")
    slope = np.diff(y, axis=-1) / h
    m = np.zeros(y.shape)
    if n > 2:
        diag = 2.0 * (h[:-1] + h[1:])
        off = h[1:-1]
        rhs = 6.0 * np.diff(slope, axis=-1)
        m[..., 1:-1] = solve_tridiagonal(off, diag, off, rhs)
    a = y[..., :-1]
    b = slope - h * (2.0 * m[..., :-1] + m[..., 1:]) / 6.0
    c = m[..., :-1] / 2.0
    d = np.diff(m, axis=-1) / (6.0 * h)
    return NaturalSpline(x, a, b, c, d, m)


def last_frame_copy(clip: np.ndarray) -> np.ndarray:
    """Frame ``T-1`` of a clip with time on the last axis."""
    if clip.shape[-1] < 1:
        raise ValueError("clip has no frames")
    return clip[..., -1].copy()


def spline_extrapolate_next(clip: np.ndarray) -> np.ndarray:
    """Per-pixel natural spline on ``t = 0..T-1`` evaluated at ``t = T``, clamped to [0, 1]."""
    T = clip.shape[-1]
    if T < 2:
        raise ValueError(f"extrapolation needs T >= 2, got {T}")
    return np.clip(spline_fit_natural(clip)(float(T)), 0.0, 1.0)


def spline_interpolate_missing(before: np.ndarray, after: np.ndarray) -> np.ndarray:
    """Per-pixel natural spline on knots ``0..T-1`` and ``T+1``, evaluated at ``T``."""
    T = before.shape[-1]
    if T < 1:
        raise ValueError("interpolation needs at least one preceding frame")
    series = np.concatenate([before, np.asarray(after)[..., None]], axis=-1)
    knots = np.append(np.arange(T, dtype=np.float64), T + 1.0)
    return np.clip(spline_fit_natural(series, knots)(float(T)), 0.0, 1.0)
