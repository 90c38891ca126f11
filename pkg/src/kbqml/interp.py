"""Not-a-knot cubic splines over one knot vector, one or many value columns."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.linalg

from .errors import DomainError

__all__ = ["SplineCurve", "spline_fit", "spline_eval"]


@dataclass(frozen=True, eq=False)
class SplineCurve:
    """Piecewise cubic in local coordinate ``t = x - knots[i]``.

    ``coeffs`` has shape ``(4, n_intervals, n_columns)`` holding the
    ``t^3, t^2, t, 1`` coefficients.
    """

    knots: np.ndarray
    coeffs: np.ndarray
    uniform: bool
    squeeze: bool

    @property
    def values(self) -> np.ndarray:
        v = np.concatenate([self.coeffs[3], self._end_values()[None, :]], axis=0)
        return v[:, 0] if self.squeeze else v

    def _end_values(self) -> np.ndarray:
        h = self.knots[-1] - self.knots[-2]
        c = self.coeffs[:, -1, :]
        return ((c[0] * h + c[1]) * h + c[2]) * h + c[3]

    def interval(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lo, hi = self.knots[0], self.knots[-1]
        outside = (x < lo) | (x > hi) | ~np.isfinite(x)
        if np.any(outside):
            j = int(np.flatnonzero(np.atleast_1d(outside))[0])
            bad = float(np.atleast_1d(x)[j])
            raise DomainError(f"spline query {bad!r} (index {j}) outside knot range [{lo}, {hi}]")
        m = len(self.knots) - 2
        if self.uniform:
            h = (hi - lo) / (m + 1)
            idx = np.floor((x - lo) / h).astype(np.intp)
            np.clip(idx, 0, m, out=idx)
            # guard rounding at interval edges
            idx -= (x < self.knots[idx]) & (idx > 0)
            idx += (x >= self.knots[np.minimum(idx + 1, m + 1)]) & (idx < m)
            return idx
        return np.clip(np.searchsorted(self.knots, x, side="right") - 1, 0, m)

    def __call__(self, x) -> np.ndarray:
        """Evaluate every column at ``x``; shape ``x.shape (+ (n_columns,))``."""
        xa = np.asarray(x, dtype=float)
        shape = xa.shape
        xa = xa.reshape(-1)
        i = self.interval(xa)
        t = (xa - self.knots[i])[..., None]
        c = self.coeffs[:, i, :]
        out = (((c[0] * t + c[1]) * t + c[2]) * t + c[3]).reshape(shape + (-1,))
        if self.squeeze:
            out = out[..., 0]
        return float(out) if out.ndim == 0 else out

    def take(self, x, columns) -> np.ndarray:
        """Evaluate column ``columns[k]`` at ``x[k]`` for each k."""
        return self.take_block(x, columns, 1)[0]

    def take_block(self, x, first, width: int) -> np.ndarray:
        """Columns ``first[k] .. first[k] + width - 1`` at ``x[k]``; shape ``(width, len(x))``."""
        xa = np.ascontiguousarray(x, dtype=float).ravel()
        first = np.broadcast_to(np.asarray(first, dtype=np.intp), xa.shape)
        if first.size and (first.min() < 0 or first.max() + width > self.coeffs.shape[2]):
            raise IndexError("spline column out of range")
        if self.uniform:
            self._check_range(xa)
            out = np.empty((width, xa.size))
            _take_uniform(self.knots, self.coeffs, xa, np.ascontiguousarray(first), width, out)
            return out
        i = self.interval(xa)
        t = xa - self.knots[i]
        out = np.empty((width, xa.size))
        for w in range(width):
            c = self.coeffs[:, i, first + w]
            out[w] = ((c[0] * t + c[1]) * t + c[2]) * t + c[3]
        return out

    def _check_range(self, x: np.ndarray) -> None:
        lo, hi = self.knots[0], self.knots[-1]
        if not (x.size == 0 or (x.min() >= lo and x.max() <= hi)):
            self.interval(x)  # raises with the offending index


@numba.njit(cache=True)
def _take_uniform(knots, coeffs, x, first, width, out):
    # neighbour-interval slips at knot edges are harmless: the spline is C2
    n_int = knots.size - 1
    lo = knots[0]
    h = (knots[-1] - lo) / n_int
    for k in range(x.size):
        i = int((x[k] - lo) / h)
        if i < 0:
            i = 0
        elif i >= n_int:
            i = n_int - 1
        t = x[k] - knots[i]
        for w in range(width):
            j = first[k] + w
            out[w, k] = ((coeffs[0, i, j] * t + coeffs[1, i, j]) * t + coeffs[2, i, j]) * t + coeffs[3, i, j]


def spline_fit(knots, values) -> SplineCurve:
    """Fit a not-a-knot cubic spline; ``values`` may be 1-D or ``(n, k)``."""
    x = np.asarray(knots, dtype=float)
    y = np.asarray(values, dtype=float)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[:, None]
    n = x.size
    if x.ndim != 1 or n < 4:
        raise ValueError("need at least 4 knots")
    if y.shape[0] != n:
        raise ValueError(f"values length {y.shape[0]} != knots length {n}")
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise ValueError("knots and values must be finite")
    h = np.diff(x)
    if np.any(h <= 0):
        raise ValueError("knots must be strictly increasing")

    d = np.diff(y, axis=0) / h[:, None]
    # slopes s_i from a tridiagonal system; rows 0 and n-1 carry not-a-knot
    ab = np.zeros((3, n))
    rhs = np.empty_like(y)
    ab[1, 1:-1] = 2.0 * (h[:-1] + h[1:])
    ab[0, 2:] = h[:-1]
    ab[2, :-2] = h[1:]
    rhs[1:-1] = 3.0 * (h[1:, None] * d[:-1] + h[:-1, None] * d[1:])

    ab[1, 0] = h[1]
    ab[0, 1] = h[0] + h[1]
    rhs[0] = ((h[0] + 2 * (h[0] + h[1])) * h[1] * d[0] + h[0] ** 2 * d[1]) / (h[0] + h[1])

    ab[1, -1] = h[-2]
    ab[2, -2] = h[-1] + h[-2]
    rhs[-1] = (h[-1] ** 2 * d[-2] + (2 * (h[-2] + h[-1]) + h[-1]) * h[-2] * d[-1]) / (h[-2] + h[-1])

    s = scipy.linalg.solve_banded((1, 1), ab, rhs, overwrite_ab=True, check_finite=False)

    hh = h[:, None]
    c = np.empty((4, n - 1, y.shape[1]))
    c[0] = (s[:-1] + s[1:] - 2 * d) / hh**2
    c[1] = (3 * d - 2 * s[:-1] - s[1:]) / hh
    c[2] = s[:-1]
    c[3] = y[:-1]
    span = x[-1] - x[0]
    uniform = bool(np.all(np.abs(h - span / (n - 1)) <= 1e-12 * span))
    return SplineCurve(x, c, uniform, squeeze)


def spline_eval(s: SplineCurve, x):
    return s(x)
