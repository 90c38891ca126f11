"""Uniform grid, boundary diagnostics and the finite-difference generator matrix."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import AssemblyError
from .model import ModelSpec

__all__ = [
    "SpatialGrid",
    "BoundaryReport",
    "DiscretizedGenerator",
    "build_grid",
    "auto_domain",
    "fichera_check",
    "assemble_generator",
]

MIN_INTERVALS = 8


@dataclass(frozen=True)
class SpatialGrid:
    x_min: float
    x_max: float
    n: int

    @property
    def h(self) -> float:
        return (self.x_max - self.x_min) / self.n

    @cached_property
    def nodes(self) -> np.ndarray:
        x = self.x_min + self.h * np.arange(self.n + 1)
        x[-1] = self.x_max
        return x

    def contains(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x >= self.x_min) & (x <= self.x_max)


def build_grid(x_min: float, x_max: float, n: int) -> SpatialGrid:
    """Uniform grid on ``[x_min, x_max]`` with ``n`` intervals (``n + 1`` nodes)."""
    if not (np.isfinite(x_min) and np.isfinite(x_max)) or not x_min < x_max:
        raise ValueError(f"need finite x_min < x_max, got [{x_min}, {x_max}]")
    if int(n) != n or n < MIN_INTERVALS:
        raise ValueError(f"grid needs at least {MIN_INTERVALS} intervals, got {n}")
    return SpatialGrid(float(x_min), float(x_max), int(n))


def auto_domain(states: Sequence[float], margin: float = 0.5, floor: float | None = 1e-6) -> tuple[float, float]:
    """Data-covering domain ``[(1-margin) min, (1+margin) max]``.

    ``floor`` clips the lower end (used for positive processes).
    """
    s = np.asarray(states, dtype=float)
    lo, hi = float(s.min()), float(s.max())
    x_min = lo - margin * abs(lo)
    x_max = hi + margin * abs(hi)
    if floor is not None:
        x_min = max(x_min, floor)
    if x_max <= x_min:
        x_max = x_min + max(1.0, abs(x_min))
    return x_min, x_max


@dataclass(frozen=True)
class BoundaryReport:
    x: float
    value: float
    needs_bc: bool
    degenerate: bool


def fichera_check(model: ModelSpec, theta: Sequence[float], grid: SpatialGrid) -> dict[str, BoundaryReport]:
    """Boundary indicator ``(a - 0.5 d(b^2)/dx) * n`` with inward normal ``n``.

    At a degenerate lower boundary of CIR this is ``ab - sigma^2/2`` (Feller).
    A negative value means the boundary would need a condition; the extrapolated
    boundary rows are then poorly conditioned.
    """
    th = model.check_params(theta)
    out = {}
    for side, x, normal in (("lower", grid.x_min, 1.0), ("upper", grid.x_max, -1.0)):
        a = float(model.drift(x, th))
        db2 = float(model.diff_sq_derivative(x, th))
        val = normal * (a - 0.5 * db2)
        b2 = float(model.diff_sq(x, th))
        out[side] = BoundaryReport(x=x, value=val, needs_bc=bool(val < 0), degenerate=b2 == 0.0)
    return out


@dataclass(frozen=True, eq=False)
class DiscretizedGenerator:
    """Dense matrix ``L_h`` acting on nodal values; propagate with ``exp(t L_h)``."""

    matrix: np.ndarray
    grid: SpatialGrid
    theta: tuple[float, ...]
    model_name: str

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @cached_property
    def inf_norm(self) -> float:
        return float(np.abs(self.matrix).sum(axis=1).max())


# one-sided stencils at the lower boundary (mirrored at the upper)
_D1_LEFT = np.array([-1.5, 2.0, -0.5])
_D2_LEFT = np.array([2.0, -5.0, 4.0, -1.0])


def assemble_generator(model: ModelSpec, theta: Sequence[float], grid: SpatialGrid) -> DiscretizedGenerator:
    """Assemble ``L_h`` with central interior rows and extrapolated boundary rows.

    Interior row i: ``a_i (u_{i+1} - u_{i-1})/(2h) + b_i^2/2 (u_{i+1} - 2u_i + u_{i-1})/h^2``.
    Rows 0 and N apply the one-sided 3-point first and 4-point second
    derivative stencils. Diagonals are set to minus the off-diagonal row sum so
    constants lie exactly in the kernel.
    """
    th = model.check_params(theta)
    x = grid.nodes
    model.check_state(x)
    with np.errstate(all="ignore"):
        a = np.asarray(model.drift(x, th), dtype=float) * np.ones_like(x)
        b2 = np.asarray(model.diff_sq(x, th), dtype=float) * np.ones_like(x)
    bad = np.flatnonzero(~(np.isfinite(a) & np.isfinite(b2)))
    if bad.size:
        i = int(bad[0])
        raise AssemblyError(f"non-finite coefficient at node {i} (x={x[i]!r}): a={a[i]}, b^2={b2[i]}")

    n, h = grid.n, grid.h
    A = np.zeros((n + 1, n + 1))
    i = np.arange(1, n)
    lower = -a[i] / (2 * h) + b2[i] / (2 * h * h)
    upper = a[i] / (2 * h) + b2[i] / (2 * h * h)
    A[i, i - 1] = lower
    A[i, i + 1] = upper

    row0 = np.zeros(4)
    row0[:3] += a[0] * _D1_LEFT / h
    row0 += 0.5 * b2[0] * _D2_LEFT / (h * h)
    A[0, :4] = row0

    rowN = np.zeros(4)
    rowN[1:] += a[n] * (-_D1_LEFT[::-1]) / h
    rowN += 0.5 * b2[n] * _D2_LEFT[::-1] / (h * h)
    A[n, n - 3 :] = rowN

    np.fill_diagonal(A, 0.0)
    np.fill_diagonal(A, -A.sum(axis=1))
    return DiscretizedGenerator(A, grid, tuple(float(v) for v in th), model.name)
