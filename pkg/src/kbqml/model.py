"""Scalar diffusion models, closed-form CIR moments and exact generator algebra.

A model is a pair of coefficient functions for

    dX_t = a(X_t; theta) dt + b(X_t; theta) dW_t.

Built-in models keep their drift and squared diffusion as polynomials in the
state, which lets :func:`generator_apply` act on polynomials exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial import polynomial as P

from .errors import DomainError, UnsupportedModelError

__all__ = [
    "Polynomial",
    "ModelSpec",
    "polynomial_model",
    "register_model",
    "get_model",
    "CIR",
    "ICIR",
    "eval_coefficients",
    "cir_exact_moments",
    "generator_apply",
    "transform_params",
    "inverse_transform_params",
]

ArrayLike = float | np.ndarray


@dataclass(frozen=True)
class Polynomial:
    """Real polynomial stored as ascending coefficients ``c0 + c1 x + ...``.

    Trailing zeros are trimmed exactly, so ``degree`` is exact bookkeeping and
    the zero polynomial has degree -1.
    """

    coeffs: tuple[float, ...] = ()

    def __post_init__(self):
        c = [float(v) for v in self.coeffs]
        while c and c[-1] == 0.0:
            c.pop()
        object.__setattr__(self, "coeffs", tuple(c))

    @classmethod
    def monomial(cls, d: int, scale: float = 1.0) -> "Polynomial":
        return cls((0.0,) * d + (scale,))

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def is_zero(self) -> bool:
        return not self.coeffs

    def __call__(self, x: ArrayLike) -> ArrayLike:
        if not self.coeffs:
            return np.zeros_like(np.asarray(x, dtype=float)) if np.ndim(x) else 0.0
        # Horner, highest power first
        out = self.coeffs[-1] * np.ones_like(np.asarray(x, dtype=float))
        for c in reversed(self.coeffs[:-1]):
            out = out * x + c
        return out if np.ndim(x) else float(out)

    def deriv(self, m: int = 1) -> "Polynomial":
        if len(self.coeffs) <= m:
            return Polynomial()
        return Polynomial(tuple(P.polyder(self.coeffs, m)))

    def __add__(self, other: "Polynomial | float") -> "Polynomial":
        other = _as_poly(other)
        return Polynomial(tuple(P.polyadd(self.coeffs or (0.0,), other.coeffs or (0.0,))))

    __radd__ = __add__

    def __sub__(self, other: "Polynomial | float") -> "Polynomial":
        return self + (-1.0) * _as_poly(other)

    def __mul__(self, other: "Polynomial | float") -> "Polynomial":
        if isinstance(other, Polynomial):
            if self.is_zero() or other.is_zero():
                return Polynomial()
            return Polynomial(tuple(P.polymul(self.coeffs, other.coeffs)))
        return Polynomial(tuple(float(other) * c for c in self.coeffs))

    __rmul__ = __mul__


def _as_poly(v: "Polynomial | float") -> Polynomial:
    return v if isinstance(v, Polynomial) else Polynomial((float(v),))


@dataclass(frozen=True)
class ModelSpec:
    """Coefficients and parameter metadata of one SDE model.

    ``drift`` and ``diffusion`` take ``(x, theta)`` and broadcast over array
    ``x``. ``drift_poly`` / ``diff_sq_poly`` map ``theta`` to the polynomial
    coefficients when the model is polynomial; ``d_diff_sq`` is the analytic
    derivative of ``diffusion**2`` when known. ``lower_bound`` is the
    inclusive lower edge of the state domain (``None`` for the whole line).
    """

    name: str
    drift: Callable[[ArrayLike, np.ndarray], ArrayLike]
    diffusion: Callable[[ArrayLike, np.ndarray], ArrayLike]
    param_count: int
    positivity_mask: tuple[bool, ...]
    param_names: tuple[str, ...] = ()
    d_diff_sq: Callable[[ArrayLike, np.ndarray], ArrayLike] | None = None
    drift_poly: Callable[[np.ndarray], Polynomial] | None = field(default=None, repr=False)
    diff_sq_poly: Callable[[np.ndarray], Polynomial] | None = field(default=None, repr=False)
    lower_bound: float | None = None

    @property
    def is_polynomial(self) -> bool:
        return self.drift_poly is not None and self.diff_sq_poly is not None

    def check_params(self, theta: Sequence[float]) -> np.ndarray:
        th = np.asarray(theta, dtype=float)
        if th.shape != (self.param_count,):
            raise ValueError(f"{self.name}: expected {self.param_count} parameters, got {th.shape}")
        if not np.all(np.isfinite(th)):
            raise ValueError(f"{self.name}: non-finite parameter vector {th}")
        bad = [i for i, pos in enumerate(self.positivity_mask) if pos and th[i] <= 0]
        if bad:
            raise ValueError(f"{self.name}: parameters {bad} must be positive, got {th}")
        return th

    def check_state(self, x: ArrayLike) -> None:
        if self.lower_bound is None:
            return
        xa = np.asarray(x, dtype=float)
        if np.any(xa < self.lower_bound):
            lo = float(np.min(xa))
            raise DomainError(f"{self.name}: state {lo!r} below domain bound {self.lower_bound}")

    def diff_sq(self, x: ArrayLike, theta: np.ndarray) -> ArrayLike:
        b = self.diffusion(x, theta)
        return b * b

    def diff_sq_derivative(self, x: ArrayLike, theta: np.ndarray) -> ArrayLike:
        """d/dx of ``diffusion**2``; central difference when no analytic form."""
        if self.d_diff_sq is not None:
            return self.d_diff_sq(x, theta)
        x = np.asarray(x, dtype=float)
        step = 1e-6 * np.maximum(1.0, np.abs(x))
        lo = x - step
        if self.lower_bound is not None:
            # one-sided at the domain edge
            lo = np.maximum(lo, self.lower_bound)
        return (self.diff_sq(x + step, theta) - self.diff_sq(lo, theta)) / (x + step - lo)


def polynomial_model(
    name: str,
    drift_coeffs: Callable[[np.ndarray], Sequence[float]],
    diff_sq_coeffs: Callable[[np.ndarray], Sequence[float]],
    param_names: Sequence[str],
    positivity_mask: Sequence[bool] | None = None,
    lower_bound: float | None = None,
) -> ModelSpec:
    """Build a model whose drift and squared diffusion are polynomials in x.

    The coefficient callables return ascending coefficient lists for a given
    parameter vector, e.g. CIR drift ``lambda th: [th[0]*th[1], -th[0]]``.
    """
    k = len(param_names)
    mask = tuple(positivity_mask) if positivity_mask is not None else (False,) * k

    def drift_poly(th):
        return Polynomial(tuple(drift_coeffs(th)))

    def diff_sq_poly(th):
        return Polynomial(tuple(diff_sq_coeffs(th)))

    def drift(x, th):
        return drift_poly(th)(x)

    def diffusion(x, th):
        return np.sqrt(np.maximum(diff_sq_poly(th)(x), 0.0))

    def d_diff_sq(x, th):
        return diff_sq_poly(th).deriv()(x)

    return ModelSpec(
        name=name,
        drift=drift,
        diffusion=diffusion,
        param_count=k,
        positivity_mask=mask,
        param_names=tuple(param_names),
        d_diff_sq=d_diff_sq,
        drift_poly=drift_poly,
        diff_sq_poly=diff_sq_poly,
        lower_bound=lower_bound,
    )


# dX = a(b - X) dt + sigma sqrt(X) dW
CIR = polynomial_model(
    "cir",
    drift_coeffs=lambda th: (th[0] * th[1], -th[0]),
    diff_sq_coeffs=lambda th: (0.0, th[2] * th[2]),
    param_names=("a", "b", "sigma"),
    positivity_mask=(True, True, True),
    lower_bound=0.0,
)

# Reciprocal of CIR: dY = [aY + (sigma^2 - ab) Y^2] dt - sigma Y^{3/2} dW
ICIR = polynomial_model(
    "icir",
    drift_coeffs=lambda th: (0.0, th[0], th[2] * th[2] - th[0] * th[1]),
    diff_sq_coeffs=lambda th: (0.0, 0.0, 0.0, th[2] * th[2]),
    param_names=("a", "b", "sigma"),
    positivity_mask=(True, True, True),
    lower_bound=0.0,
)

_REGISTRY: dict[str, ModelSpec] = {"cir": CIR, "icir": ICIR}


def register_model(model: ModelSpec) -> ModelSpec:
    _REGISTRY[model.name.lower()] = model
    return model


def get_model(name: str) -> ModelSpec:
    try:
        return _REGISTRY[name.lower()]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; known: {sorted(_REGISTRY)}") from None


def eval_coefficients(model: ModelSpec, theta: Sequence[float], x: ArrayLike) -> tuple[ArrayLike, ArrayLike]:
    """Return ``(a(x), b(x))``; raises :class:`DomainError` outside the state domain."""
    th = model.check_params(theta)
    model.check_state(x)
    return model.drift(x, th), model.diffusion(x, th)


def cir_exact_moments(theta: Sequence[float], x: ArrayLike, dt: ArrayLike) -> tuple[ArrayLike, ArrayLike]:
    """Conditional mean and variance of CIR after elapsed time ``dt``.

    These are the standard closed forms

        mean = b + (x - b) e^{-a dt}
        var  = x sigma^2/a (e^{-a dt} - e^{-2 a dt}) + b sigma^2/(2a) (1 - e^{-a dt})^2

    used as the benchmark oracle throughout.
    """
    a, b, s = (float(v) for v in CIR.check_params(theta))
    x = np.asarray(x, dtype=float)
    dt = np.asarray(dt, dtype=float)
    if np.any(x < 0) or np.any(dt < 0):
        raise DomainError("cir_exact_moments needs x >= 0 and dt >= 0")
    e1 = np.exp(-a * dt)
    mean = b + (x - b) * e1
    var = x * (s * s / a) * (e1 - e1 * e1) + b * (s * s / (2 * a)) * (1 - e1) ** 2
    if mean.ndim == 0:
        return float(mean), float(var)
    return mean, var


def generator_apply(model: ModelSpec, theta: Sequence[float], p: Polynomial) -> Polynomial:
    """Apply ``a p' + 0.5 b^2 p''`` to a polynomial with exact coefficient arithmetic."""
    if not model.is_polynomial:
        raise UnsupportedModelError(f"model {model.name!r} has no polynomial coefficients")
    th = model.check_params(theta)
    a = model.drift_poly(th)
    b2 = model.diff_sq_poly(th)
    return a * p.deriv(1) + 0.5 * (b2 * p.deriv(2))


def transform_params(u: Sequence[float], mask: Sequence[bool]) -> np.ndarray:
    """Map unconstrained values to parameters (``exp`` on masked entries)."""
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValueError(f"non-finite unconstrained parameters {u}")
    m = np.asarray(mask, dtype=bool)
    return np.where(m, np.exp(np.where(m, u, 0.0)), u)


def inverse_transform_params(theta: Sequence[float], mask: Sequence[bool]) -> np.ndarray:
    th = np.asarray(theta, dtype=float)
    m = np.asarray(mask, dtype=bool)
    if not np.all(np.isfinite(th)) or np.any(th[m] <= 0):
        raise ValueError(f"cannot map {th} to unconstrained space")
    return np.where(m, np.log(np.where(m, th, 1.0)), th)
