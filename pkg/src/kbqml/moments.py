"""Conditional mean/variance providers: backward equation, Euler-Maruyama, Ito-Taylor.

Every provider is bound to one model and one parameter vector and exposes
``moments(x, dt) -> (mean, var)`` vectorized over query states and elapsed
times.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from .discretize import SpatialGrid, assemble_generator
from .errors import DomainError, NumericalError, UnsupportedModelError
from .interp import SplineCurve, spline_fit
from .model import ModelSpec, cir_exact_moments
from .propagator import VAR_EPS, PropagatorPlan, build_plan, propagate_columns, variance_floor

__all__ = [
    "MomentSurface",
    "MomentProvider",
    "BackwardProvider",
    "EulerProvider",
    "ExactCIRProvider",
    "ItoTaylorProvider",
    "make_provider",
    "backward_moments",
    "euler_moments",
    "ito_taylor_moments",
    "METHODS",
]

METHODS = ("backward", "euler", "ito1", "ito2")
LOG_2PI = math.log(2.0 * math.pi)


def _floor_var(mean, second_or_var, *, raw: bool):
    v = second_or_var - mean * mean if raw else second_or_var
    fl = variance_floor(second_or_var if raw else mean * mean + second_or_var)
    return np.where(v < fl, fl, v)


class MomentProvider:
    kind = "abstract"

    def __init__(self, model: ModelSpec, theta: Sequence[float]):
        self.model = model
        self.theta = model.check_params(theta)

    def moments(self, x, dt) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def fused_loglik(self, x_prev, dt, x_next) -> float | None:
        """Summed Gaussian quasi-log-likelihood in one pass, or ``None`` if unavailable."""
        return None

    def check_domain(self, x) -> None:
        """Raise :class:`DomainError` naming the first query outside the domain."""
        try:
            self.model.check_state(x)
        except DomainError:
            xa = np.atleast_1d(np.asarray(x, dtype=float))
            j = int(np.flatnonzero(xa < self.model.lower_bound)[0])
            raise DomainError(f"query index {j} (x={xa[j]!r}) outside the {self.model.name} state domain") from None


class EulerProvider(MomentProvider):
    kind = "euler"

    def moments(self, x, dt):
        return euler_moments(self.model, self.theta, x, dt)


def euler_moments(model: ModelSpec, theta, x, dt):
    """``mean = x + a(x) dt``, ``var = b(x)^2 dt``."""
    th = model.check_params(theta)
    x = np.asarray(x, dtype=float)
    dt = np.asarray(dt, dtype=float)
    a = model.drift(x, th)
    b2 = _diff_sq(model, th, x)
    return x + a * dt, b2 * dt


def _diff_sq(model: ModelSpec, th, x):
    if model.diff_sq_poly is not None:
        return model.diff_sq_poly(th)(x)
    return model.diff_sq(x, th)


class ExactCIRProvider(MomentProvider):
    """Closed-form CIR transition moments; a reference, not an estimator."""

    kind = "exact"

    def __init__(self, model: ModelSpec, theta):
        if model.name != "cir":
            raise UnsupportedModelError(f"exact moments are only available for cir, not {model.name!r}")
        super().__init__(model, theta)

    def moments(self, x, dt):
        self.check_domain(x)
        return cir_exact_moments(self.theta, x, dt)


# --- Ito-Taylor ---------------------------------------------------------------
# Polynomials in z = y - x0 with one coefficient column per query point:
# arrays of shape (degree + 1, n_points).


def _pmul(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    out = np.zeros((p.shape[0] + q.shape[0] - 1, p.shape[1]))
    for i in range(p.shape[0]):
        out[i : i + q.shape[0]] += p[i] * q
    return out


def _padd(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    if p.shape[0] < q.shape[0]:
        p, q = q, p
    out = p.copy()
    out[: q.shape[0]] += q
    return out


def _pder(p: np.ndarray) -> np.ndarray:
    if p.shape[0] == 1:
        return np.zeros_like(p)
    return p[1:] * np.arange(1, p.shape[0])[:, None]


def _shifted(poly, x0: np.ndarray) -> np.ndarray:
    """Coefficients of ``poly(x0 + z)`` in powers of z."""
    d = max(poly.degree, 0)
    cols = []
    q = poly
    for j in range(d + 1):
        cols.append(q(x0) / math.factorial(j))
        q = q.deriv()
    return np.array(cols, dtype=float).reshape(d + 1, -1)


def _centered_taylor(model: ModelSpec, th, x0: np.ndarray, dt: np.ndarray, order: int):
    alpha = _shifted(model.drift_poly(th), x0)
    beta = _shifted(model.diff_sq_poly(th), x0)
    npts = x0.size

    def gen(p):
        return _padd(_pmul(alpha, _pder(p)), 0.5 * _pmul(beta, _pder(_pder(p))))

    z = np.zeros((2, npts))
    z[1] = 1.0
    z2 = np.zeros((3, npts))
    z2[2] = 1.0
    # M[l] = (L^l z)(0) / l!,  C[l] = (L^l z^2)(0) / l!
    M, C = [np.zeros(npts)], [np.zeros(npts)]
    p, q = z, z2
    for ell in range(1, order + 1):
        p, q = gen(p), gen(q)
        f = math.factorial(ell)
        M.append(p[0] / f)
        C.append(q[0] / f)

    mean = x0.copy()
    for ell in range(1, order + 1):
        mean = mean + M[ell] * dt**ell
    var = np.zeros(npts)
    for ell in range(1, order + 1):
        v = C[ell]
        for i in range(1, ell):
            v = v - M[i] * M[ell - i]
        var = var + v * dt**ell
    return mean, var


def ito_taylor_moments(model: ModelSpec, theta, x, dt, order: int, substeps: int = 1):
    """Truncated Ito-Taylor moments of order ``order``.

    The expansion is carried out for ``g(y) = y - x`` and ``g(y) = (y - x)^2``
    around each query point, and the squared mean is truncated at the same
    order in ``dt``. At order 1 this yields ``x + a dt`` and ``b^2 dt``.
    With ``substeps > 1`` the one-step map is iterated over ``dt / substeps``
    and variances are chained with the linearized law of total variance.
    """
    if not model.is_polynomial:
        raise UnsupportedModelError(f"model {model.name!r} has no polynomial coefficients")
    if order < 1:
        raise ValueError("Ito-Taylor order must be >= 1")
    th = model.check_params(theta)
    x = np.asarray(x, dtype=float)
    shape = np.broadcast_shapes(x.shape, np.shape(dt))
    x0 = np.broadcast_to(x, shape).ravel().astype(float)
    d = np.broadcast_to(np.asarray(dt, dtype=float), shape).ravel()

    if substeps <= 1:
        mean, var = _centered_taylor(model, th, x0, d, order)
    else:
        h = d / substeps
        mean, var = x0.copy(), np.zeros_like(x0)
        for _ in range(substeps):
            eps = 1e-6 * np.maximum(1.0, np.abs(mean))
            m_new, v_new = _centered_taylor(model, th, mean, h, order)
            m_hi, _ = _centered_taylor(model, th, mean + eps, h, order)
            m_lo, _ = _centered_taylor(model, th, mean - eps, h, order)
            slope = (m_hi - m_lo) / (2 * eps)
            var = v_new + slope * slope * var
            mean = m_new
    var = np.maximum(var, variance_floor(mean * mean + var))
    if not shape:
        return float(mean[0]), float(var[0])
    return mean.reshape(shape), var.reshape(shape)


class ItoTaylorProvider(MomentProvider):
    def __init__(self, model, theta, order: int, substeps: int = 1):
        super().__init__(model, theta)
        self.order = order
        self.substeps = substeps
        self.kind = f"ito{order}"

    def moments(self, x, dt):
        return ito_taylor_moments(self.model, self.theta, x, dt, self.order, self.substeps)


# --- backward equation ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MomentSurface:
    """Spline representation of ``x -> (E[X_dt | x], E[X_dt^2 | x])``."""

    elapsed: float
    multiple: int
    spline: SplineCurve
    grid: SpatialGrid
    theta: tuple[float, ...]

    def __call__(self, x) -> tuple[np.ndarray, np.ndarray]:
        u = self.spline(x)
        u1, u2 = u[..., 0], u[..., 1]
        var = _floor_var(u1, u2, raw=True)
        if np.ndim(u1) == 0:
            return float(u1), float(var)
        return u1, var


class BackwardProvider(MomentProvider):
    """Moments from ``exp(t L_h)`` applied to ``x`` and ``x^2`` on a grid.

    Elapsed times are rounded to the nearest positive multiple of
    ``base_step``; a single exponential ``exp(base_step L_h)`` serves every
    multiple. Propagated nodal vectors are cached per multiple.
    """

    kind = "backward"

    def __init__(self, model, theta, grid: SpatialGrid, base_step: float, max_multiple: int = 1_000_000):
        super().__init__(model, theta)
        if not base_step > 0:
            raise ValueError("base_step must be positive")
        self.grid = grid
        self.base_step = float(base_step)
        self.max_multiple = int(max_multiple)
        self._lock = threading.Lock()
        self._plan: PropagatorPlan | None = None
        self._nodal: dict[int, np.ndarray] = {}
        self._frontier: tuple[int, np.ndarray] | None = None
        self._splines: dict[tuple[int, ...], SplineCurve] = {}

    @property
    def plan(self) -> PropagatorPlan:
        with self._lock:
            if self._plan is None:
                L = assemble_generator(self.model, self.theta, self.grid)
                self._plan = build_plan(L, self.base_step, self.max_multiple)
                x = self.grid.nodes
                self._frontier = (0, np.column_stack([x, x * x]))
            return self._plan

    def quantize(self, dt) -> np.ndarray:
        dt = np.asarray(dt, dtype=float)
        if np.any(~(dt > 0)):
            raise ValueError("elapsed times must be positive")
        m = np.maximum(1, np.rint(dt / self.base_step)).astype(np.int64)
        if np.any(m > self.max_multiple):
            raise ValueError(f"elapsed time needs multiple {int(m.max())} > max_multiple {self.max_multiple}")
        return m

    def nodal(self, multiples) -> dict[int, np.ndarray]:
        """Nodal ``(u1, u2)`` columns for each requested multiple."""
        plan = self.plan
        want = sorted(set(int(k) for k in multiples))
        with self._lock:
            missing = [k for k in want if k not in self._nodal]
            if missing:
                start, U = self._frontier
                # continue from the furthest propagated state; earlier gaps restart from 0
                if missing[0] < start:
                    x = self.grid.nodes
                    start, U = 0, np.column_stack([x, x * x])
                got = propagate_columns(_Shifted(plan, start), U, [k - start for k in missing])
                for k in missing:
                    self._nodal[k] = got[k - start]
                last = missing[-1]
                if last > self._frontier[0]:
                    self._frontier = (last, self._nodal[last])
            return {k: self._nodal[k] for k in want}

    def surface(self, dt: float) -> MomentSurface:
        m = int(self.quantize(dt))
        U = self.nodal([m])[m]
        return MomentSurface(m * self.base_step, m, spline_fit(self.grid.nodes, U), self.grid, tuple(self.theta))

    def _spline_for(self, key: tuple[int, ...]) -> SplineCurve:
        with self._lock:
            s = self._splines.get(key)
        if s is None:
            nod = self.nodal(key)
            U = np.concatenate([nod[k] for k in key], axis=1)
            s = spline_fit(self.grid.nodes, U)
            with self._lock:
                s = self._splines.setdefault(key, s)
        return s

    def _queries(self, x, dt):
        x = np.asarray(x, dtype=float)
        shape = np.broadcast_shapes(x.shape, np.shape(dt))
        xf = np.broadcast_to(x, shape).ravel()
        m = np.broadcast_to(self.quantize(dt), shape).ravel()
        outside = ~self.grid.contains(xf)
        if np.any(outside):
            j = int(np.flatnonzero(outside)[0])
            raise DomainError(
                f"query index {j} (x={xf[j]!r}) outside grid [{self.grid.x_min}, {self.grid.x_max}]"
            )
        return shape, xf, m

    def fused_loglik(self, x_prev, dt, x_next):
        x = np.asarray(x_prev, dtype=float)
        dt = np.asarray(dt, dtype=float)
        y = np.asarray(x_next, dtype=float)
        if not (x.ndim == dt.ndim == y.ndim == 1 and x.size == dt.size == y.size > 0 and dt[0] > 0):
            return None
        m0 = int(self.quantize(dt[0]))
        s = self._spline_for((m0,))
        if not s.uniform:
            return None
        status, total = _uniform_loglik(
            s.knots, s.coeffs, np.ascontiguousarray(x), np.ascontiguousarray(dt), np.ascontiguousarray(y),
            self.base_step, m0, self.grid.x_min, self.grid.x_max, VAR_EPS, LOG_2PI,
        )
        if status == 1:
            # mixed multiples or a bad query: the array path handles and reports it
            return None
        if status == 2:
            raise NumericalError("quasi-likelihood needs finite moments and positive variance")
        return total

    def moments(self, x, dt):
        shape, xf, m = self._queries(x, dt)
        if m.size and m.min() == m.max():
            key, inv = m[:1], np.zeros(m.size, dtype=np.intp)
        else:
            key, inv = np.unique(m, return_inverse=True)
        s = self._spline_for(tuple(int(k) for k in key))
        u1, u2 = s.take_block(xf, 2 * inv, 2)
        var = _floor_var(u1, u2, raw=True)
        if not shape:
            return float(u1[0]), float(var[0])
        return u1.reshape(shape), var.reshape(shape)


class _Shifted:
    """View of a plan whose multiples are counted from an already propagated state."""

    def __init__(self, plan: PropagatorPlan, offset: int):
        self.E_base = plan.E_base
        self.max_multiple = plan.max_multiple - offset


@numba.njit(cache=True)
def _uniform_loglik(knots, coeffs, x, dt, y, base_step, m0, x_lo, x_hi, eps, log2pi):
    # status 0: done; 1: needs the array path; 2: non-finite moments.
    # Spline columns 0 and 1 hold u1 and u2; floors match the array path.
    n_int = knots.size - 1
    lo = knots[0]
    h = (knots[-1] - lo) / n_int
    total = 0.0
    for k in range(x.size):
        if not (dt[k] > 0 and x[k] >= x_lo and x[k] <= x_hi):
            return 1, 0.0
        if max(1.0, np.rint(dt[k] / base_step)) != m0:
            return 1, 0.0
        i = int((x[k] - lo) / h)
        if i < 0:
            i = 0
        elif i >= n_int:
            i = n_int - 1
        t = x[k] - knots[i]
        u1 = ((coeffs[0, i, 0] * t + coeffs[1, i, 0]) * t + coeffs[2, i, 0]) * t + coeffs[3, i, 0]
        u2 = ((coeffs[0, i, 1] * t + coeffs[1, i, 1]) * t + coeffs[2, i, 1]) * t + coeffs[3, i, 1]
        if not (math.isfinite(u1) and math.isfinite(u2)):
            return 2, 0.0
        v = u2 - u1 * u1
        fl = eps * max(1.0, abs(u2))
        if v < fl:
            v = fl
        fl = eps * max(1.0, u1 * u1 + v)
        if v < fl:
            v = fl
        r = y[k] - u1
        total += -0.5 * (log2pi + math.log(v)) - r * r / (2.0 * v)
    return 0, total


def backward_moments(provider: BackwardProvider, x, dt):
    return provider.moments(x, dt)


def make_provider(
    method: str,
    model: ModelSpec,
    theta,
    *,
    grid: SpatialGrid | None = None,
    base_step: float | None = None,
    ito_substeps: int = 1,
) -> MomentProvider:
    method = method.lower()
    if method == "backward":
        if grid is None or base_step is None:
            raise ValueError("backward provider needs a grid and a base step")
        return BackwardProvider(model, theta, grid, base_step)
    if method == "euler":
        return EulerProvider(model, theta)
    if method == "exact":
        return ExactCIRProvider(model, theta)
    if method.startswith("ito") and method[3:].isdigit():
        return ItoTaylorProvider(model, theta, int(method[3:]), ito_substeps)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
