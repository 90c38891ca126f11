"""Matrix exponential and moment propagation for the discretized generator.

One exponential ``E = exp(delta L_h)`` is formed per parameter vector; every
elapsed time that is an integer multiple of ``delta`` is then reached by
repeated matrix-vector products on the two initial vectors ``x`` and ``x^2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import scipy.linalg

from .discretize import DiscretizedGenerator
from .errors import MatrixExpError

__all__ = [
    "PropagatorPlan",
    "MomentVectors",
    "matrix_exp",
    "choose_substeps",
    "build_plan",
    "propagate_moments",
    "propagate_columns",
    "conditional_variance",
    "variance_floor",
]

# Pade(13) coefficients (Higham 2005)
_PADE13 = (
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
)

VAR_EPS = 1e-12


def choose_substeps(norm: float, tau: float) -> int:
    """Smallest power of two ``m`` with ``norm * tau / m <= 1``."""
    if norm < 0 or tau <= 0:
        raise ValueError("need norm >= 0 and tau > 0")
    r = norm * tau
    if not math.isfinite(r):
        raise MatrixExpError(f"cannot scale matrix with ||M|| tau = {r}")
    if r <= 1.0:
        return 1
    m = 1 << max(0, math.ceil(math.log2(r)))
    while norm * tau / m > 1.0:
        m <<= 1
    while m > 1 and norm * tau / (m >> 1) <= 1.0:
        m >>= 1
    return m


def _pade13(X: np.ndarray) -> np.ndarray:
    c = _PADE13
    ident = np.eye(X.shape[0])
    X2 = X @ X
    X4 = X2 @ X2
    X6 = X4 @ X2
    U = X @ (X6 @ (c[13] * X6 + c[11] * X4 + c[9] * X2) + c[7] * X6 + c[5] * X4 + c[3] * X2 + c[1] * ident)
    V = X6 @ (c[12] * X6 + c[10] * X4 + c[8] * X2) + c[6] * X6 + c[4] * X4 + c[2] * X2 + c[0] * ident
    return scipy.linalg.solve(V - U, V + U)


def matrix_exp(M: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """``exp(tau M)`` by scaling and squaring around a Pade(13) core.

    The scaling factor is ``choose_substeps(||M||_inf, tau)``, so the core is
    evaluated at infinity norm at most one and squared ``log2(m)`` times.
    """
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("matrix_exp needs a square matrix")
    if not np.all(np.isfinite(M)):
        raise MatrixExpError("matrix has non-finite entries")
    norm = float(np.abs(M).sum(axis=1).max()) if M.size else 0.0
    if norm == 0.0:
        return np.eye(M.shape[0])
    m = choose_substeps(norm, tau)
    E = _pade13(M * (tau / m))
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(m.bit_length() - 1):
            E = E @ E
    if not np.all(np.isfinite(E)):
        raise MatrixExpError(f"matrix exponential overflowed (||M||_inf = {norm:.3e}, tau = {tau})")
    return E


@dataclass(frozen=True, eq=False)
class PropagatorPlan:
    base_step: float
    E_base: np.ndarray
    max_multiple: int
    generator: DiscretizedGenerator

    @property
    def nodes(self) -> np.ndarray:
        return self.generator.grid.nodes

    def row_sum_deviation(self) -> float:
        return float(np.abs(self.E_base.sum(axis=1) - 1.0).max())


@dataclass(frozen=True, eq=False)
class MomentVectors:
    """Nodal first and second conditional raw moments after ``elapsed`` time."""

    u1: np.ndarray
    u2: np.ndarray
    elapsed: float


def build_plan(L: DiscretizedGenerator, delta: float, max_multiple: int) -> PropagatorPlan:
    if not delta > 0:
        raise ValueError(f"base step must be positive, got {delta}")
    if max_multiple < 1:
        raise ValueError("max_multiple must be >= 1")
    E = matrix_exp(L.matrix, delta)
    return PropagatorPlan(float(delta), E, int(max_multiple), L)


def propagate_columns(plan: PropagatorPlan, U0: np.ndarray, multiples: Iterable[int]) -> dict[int, np.ndarray]:
    """Apply ``E_base`` repeatedly to the columns of ``U0``, recording given multiples.

    Multiple 0 returns ``U0`` itself. The cost is ``max(multiples)``
    matrix-vector products.
    """
    wanted = sorted(set(int(k) for k in multiples))
    if wanted and (wanted[0] < 0 or wanted[-1] > plan.max_multiple):
        raise ValueError(f"multiples must lie in [0, {plan.max_multiple}], got {wanted[0]}..{wanted[-1]}")
    out: dict[int, np.ndarray] = {}
    U = np.array(U0, dtype=float)
    step = 0
    for k in wanted:
        while step < k:
            U = plan.E_base @ U
            step += 1
        out[k] = U
    return out


def propagate_moments(plan: PropagatorPlan, multiples: Iterable[int]) -> dict[int, MomentVectors]:
    x = plan.nodes
    cols = propagate_columns(plan, np.column_stack([x, x * x]), multiples)
    return {k: MomentVectors(U[:, 0].copy(), U[:, 1].copy(), k * plan.base_step) for k, U in cols.items()}


def variance_floor(u2: np.ndarray) -> np.ndarray:
    return VAR_EPS * np.maximum(1.0, np.abs(u2))


def conditional_variance(mv: MomentVectors) -> tuple[np.ndarray, int]:
    """``u2 - u1^2`` floored at ``1e-12 max(1, |u2|)``; also returns the floored count."""
    v = np.asarray(mv.u2, dtype=float) - np.asarray(mv.u1, dtype=float) ** 2
    floor = variance_floor(np.asarray(mv.u2, dtype=float))
    low = v < floor
    return np.where(low, floor, v), int(low.sum())
