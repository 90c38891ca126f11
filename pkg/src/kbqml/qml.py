"""Gaussian quasi-likelihood and a Nelder-Mead maximizer."""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .discretize import SpatialGrid, auto_domain, build_grid
from .errors import DomainError, NumericalError
from .model import ModelSpec, inverse_transform_params, transform_params
from .moments import MomentProvider, make_provider
from .propagator import variance_floor

__all__ = [
    "ObservationSeries",
    "FitResult",
    "NelderMeadOptions",
    "Termination",
    "gaussian_quasi_loglik",
    "qml_objective",
    "nelder_mead",
    "default_grid",
    "default_base_step",
    "fit_qml",
]

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class ObservationSeries:
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        x = np.asarray(self.states, dtype=float)
        if t.ndim != 1 or t.shape != x.shape:
            raise ValueError("times and states must be 1-D arrays of equal length")
        if t.size < 2:
            raise ValueError("need at least one transition (two observations)")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(x))):
            raise ValueError("times and states must be finite")
        gaps = np.diff(t)
        if np.any(gaps <= 0):
            raise ValueError("times must be strictly increasing")
        gaps.flags.writeable = False
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", x)
        object.__setattr__(self, "_gaps", gaps)

    @property
    def gaps(self) -> np.ndarray:
        return self._gaps

    @property
    def n_transitions(self) -> int:
        return self.times.size - 1

    def __len__(self) -> int:
        return self.times.size


class Termination(str, enum.Enum):
    CONVERGED = "converged"
    MAX_ITER = "max_iter"
    NON_FINITE_START = "non_finite_start"


@dataclass
class FitResult:
    theta: np.ndarray
    loglik: float
    iterations: int
    function_evals: int
    converged: bool
    termination_reason: Termination
    unconstrained: np.ndarray | None = None
    wall_ms: float = float("nan")


def gaussian_quasi_loglik(x, mean, var):
    """Gaussian log-density ``-0.5 log(2 pi var) - (x - mean)^2 / (2 var)``."""
    var = np.asarray(var, dtype=float)
    if np.any(~(var > 0)):
        raise NumericalError("quasi-likelihood needs strictly positive variance")
    r = np.asarray(x, dtype=float) - mean
    out = -0.5 * (LOG_2PI + np.log(var)) - r * r / (2.0 * var)
    return float(out) if np.ndim(out) == 0 else out


def qml_objective(series: ObservationSeries, provider: MomentProvider) -> float:
    """Sum of Gaussian log quasi-densities over all transitions, in index order."""
    x_prev = series.states[:-1]
    try:
        total = provider.fused_loglik(x_prev, series.gaps, series.states[1:])
        if total is not None:
            return float(total)
        mean, var = provider.moments(x_prev, series.gaps)
    except DomainError as exc:
        raise DomainError(f"observation out of domain: {exc}") from None
    fl = variance_floor(np.abs(mean) ** 2 + np.abs(var))
    low = ~(var >= fl)
    if np.any(low):
        var = np.where(low, fl, var)
    terms = gaussian_quasi_loglik(series.states[1:], mean, var)
    return float(np.sum(terms))


# --- optimizer ----------------------------------------------------------------


@dataclass(frozen=True)
class NelderMeadOptions:
    max_iter: int = 2000
    xtol: float = 1e-6
    ftol: float = 1e-8
    rel_step: float = 0.05
    zero_step: float = 0.00025
    reflect: float = 1.0
    expand: float = 2.0
    contract: float = 0.5
    shrink: float = 0.5


def nelder_mead(
    f: Callable[[np.ndarray], float],
    x0: Sequence[float],
    options: NelderMeadOptions | None = None,
    trace: list | None = None,
) -> FitResult:
    """Maximize ``f`` with the classical Nelder-Mead simplex.

    Non-finite values count as ``-inf``. Convergence requires both the simplex
    diameter (max-norm against the best vertex) to fall below ``xtol`` and the
    spread of values below ``ftol``. When ``trace`` is a list, the best vertex
    after every iteration is appended to it.
    """
    opt = options or NelderMeadOptions()
    x0 = np.asarray(x0, dtype=float)
    n = x0.size
    evals = 0

    def g(x):
        nonlocal evals
        evals += 1
        with np.errstate(all="ignore"):
            try:
                v = float(f(x))
            except (NumericalError, np.linalg.LinAlgError, FloatingPointError, OverflowError):
                return math.inf
        return -v if math.isfinite(v) else math.inf

    sim = np.empty((n + 1, n))
    sim[0] = x0
    for i in range(n):
        y = x0.copy()
        y[i] = x0[i] * (1 + opt.rel_step) if x0[i] != 0 else opt.zero_step
        sim[i + 1] = y
    fs = np.array([g(v) for v in sim])
    if not math.isfinite(fs[0]):
        return FitResult(x0, -math.inf, 0, evals, False, Termination.NON_FINITE_START, x0)

    it = 0
    reason = Termination.MAX_ITER
    while True:
        order = np.argsort(fs, kind="stable")
        sim, fs = sim[order], fs[order]
        if trace is not None and it > 0:
            trace.append(sim[0].copy())
        if np.max(np.abs(sim[1:] - sim[0])) <= opt.xtol and np.max(np.abs(fs[1:] - fs[0])) <= opt.ftol:
            reason = Termination.CONVERGED
            break
        if it >= opt.max_iter:
            break
        it += 1

        c = sim[:-1].mean(axis=0)
        xr = c + opt.reflect * (c - sim[-1])
        fr = g(xr)
        if fr < fs[0]:
            xe = c + opt.expand * (xr - c)
            fe = g(xe)
            if fe < fr:
                sim[-1], fs[-1] = xe, fe
            else:
                sim[-1], fs[-1] = xr, fr
            continue
        if fr < fs[-2]:
            sim[-1], fs[-1] = xr, fr
            continue
        if fr < fs[-1]:
            xc = c + opt.contract * (xr - c)
            fc = g(xc)
            if fc <= fr:
                sim[-1], fs[-1] = xc, fc
                continue
        else:
            xc = c + opt.contract * (sim[-1] - c)
            fc = g(xc)
            if fc < fs[-1]:
                sim[-1], fs[-1] = xc, fc
                continue
        for i in range(1, n + 1):
            sim[i] = sim[0] + opt.shrink * (sim[i] - sim[0])
            fs[i] = g(sim[i])

    best = sim[0]
    return FitResult(
        theta=best.copy(),
        loglik=-fs[0],
        iterations=it,
        function_evals=evals,
        converged=reason is Termination.CONVERGED,
        termination_reason=reason,
        unconstrained=best.copy(),
    )


# --- estimation driver --------------------------------------------------------

DEFAULT_GRID_N = 128
DEFAULT_STEP_DIVISOR = 16


def default_grid(series: ObservationSeries, model: ModelSpec, n: int = DEFAULT_GRID_N, margin: float = 0.5) -> SpatialGrid:
    floor = 1e-6 if model.lower_bound is not None else None
    lo, hi = auto_domain(series.states, margin=margin, floor=floor)
    return build_grid(lo, hi, n)


def default_base_step(series: ObservationSeries, divisor: int = DEFAULT_STEP_DIVISOR) -> float:
    return float(series.gaps.min()) / divisor


def fit_qml(
    series: ObservationSeries,
    model: ModelSpec,
    method: str,
    init: Sequence[float],
    *,
    grid: SpatialGrid | None = None,
    base_step: float | None = None,
    options: NelderMeadOptions | None = None,
) -> FitResult:
    """Maximize the quasi-likelihood over parameters, searching in log space
    for positive parameters."""
    mask = model.positivity_mask
    if method == "backward":
        grid = grid or default_grid(series, model)
        base_step = base_step or default_base_step(series)
        if np.any(~grid.contains(series.states)):
            raise DomainError("grid does not cover every observation")
    if np.ptp(series.states) == 0:
        warnings.warn("constant observation series; variances will be floored", RuntimeWarning)

    def objective(u):
        th = transform_params(u, mask)
        if not np.all(np.isfinite(th)) or any(m and t <= 0 for m, t in zip(mask, th)):
            return -math.inf
        prov = make_provider(method, model, th, grid=grid, base_step=base_step)
        return qml_objective(series, prov)

    res = nelder_mead(objective, inverse_transform_params(init, mask), options)
    res.theta = transform_params(res.unconstrained, mask)
    return res
