"""Synthetic observation series from CIR / iCIR by fine-substep Euler-Maruyama.

Randomness comes from numpy's PCG64 (128-bit state). A schedule seed feeds
two independent child streams: one for random sampling gaps and one for the
Brownian increments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import SimulationError
from .model import ModelSpec
from .qml import ObservationSeries

__all__ = [
    "SamplingSchedule",
    "SimConfig",
    "SimReport",
    "make_schedule",
    "simulate_series",
    "POSITIVE_FLOOR",
    "EXPLOSION_BOUND",
]

POSITIVE_FLOOR = 1e-10
EXPLOSION_BOUND = 1e12
_CHUNK = 1 << 22  # normals per generated block


@dataclass(frozen=True)
class SamplingSchedule:
    """``kind`` is ``"fixed"`` (uses ``dt``) or ``"uniform"`` (``dt_lo``, ``dt_hi``).

    ``k`` counts all simulated observations, burn-in included.
    """

    kind: str
    k: int
    burnin: int = 0
    dt: float | None = None
    dt_lo: float | None = None
    dt_hi: float | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("schedule needs k >= 1")
        if not 0 <= self.burnin < self.k:
            raise ValueError(f"burn-in {self.burnin} must be in [0, k)")
        if self.kind == "fixed":
            if self.dt is None or not self.dt > 0:
                raise ValueError("fixed schedule needs dt > 0")
        elif self.kind == "uniform":
            if self.dt_lo is None or self.dt_hi is None or not 0 < self.dt_lo < self.dt_hi:
                raise ValueError("uniform schedule needs 0 < dt_lo < dt_hi")
        else:
            raise ValueError(f"unknown schedule kind {self.kind!r}")


@dataclass(frozen=True)
class SimConfig:
    model: ModelSpec
    theta: tuple[float, ...]
    x0: float
    substeps: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.substeps < 64:
            raise ValueError("substeps must be >= 64")
        th = np.asarray(self.theta, dtype=float)
        if th.shape != (self.model.param_count,) or not np.all(np.isfinite(th)):
            raise ValueError(f"{self.model.name}: bad parameter vector {self.theta!r}")
        # zero is allowed here (sigma = 0 gives the deterministic path)
        if any(m and v < 0 for m, v in zip(self.model.positivity_mask, th)):
            raise ValueError(f"{self.model.name}: parameters must be non-negative, got {self.theta!r}")
        self.model.check_state(self.x0)


@dataclass(frozen=True)
class SimReport:
    series: ObservationSeries
    floor_hits: int


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    gap_ss, noise_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.Generator(np.random.PCG64(gap_ss)), np.random.Generator(np.random.PCG64(noise_ss))


def make_schedule(kind: str, params: dict, k: int, burnin: int = 0, seed: int = 0) -> tuple[SamplingSchedule, np.ndarray]:
    """Build a schedule and draw its ``k`` gaps (``t_0 = 0`` is implicit)."""
    sched = SamplingSchedule(kind=kind, k=k, burnin=burnin, **params)
    return sched, realize_gaps(sched, _streams(seed)[0])


def realize_gaps(sched: SamplingSchedule, rng: np.random.Generator) -> np.ndarray:
    if sched.kind == "fixed":
        return np.full(sched.k, float(sched.dt))
    return rng.uniform(sched.dt_lo, sched.dt_hi, size=sched.k)


# coefficient kinds understood by the kernel
_KIND_CIR = 0
_KIND_ICIR = 1


@numba.njit(cache=True)
def _em_block(x, kind, a, b, s, gaps, substeps, z, out, start_step):
    """Advance ``x`` across ``gaps``; returns (x, floor hits, failing step or -1)."""
    hits = 0
    j = 0
    for g in range(gaps.size):
        h = gaps[g] / substeps
        sh = np.sqrt(h)
        for _ in range(substeps):
            if kind == _KIND_CIR:
                drift = a * (b - x)
                diff = s * np.sqrt(x)
            else:
                drift = a * x + (s * s - a * b) * x * x
                diff = s * x * np.sqrt(x)
            x = x + drift * h + diff * sh * z[j]
            j += 1
            if x < POSITIVE_FLOOR:
                x = POSITIVE_FLOOR
                hits += 1
            if not (abs(x) <= EXPLOSION_BOUND):
                return x, hits, start_step + j
        out[g] = x
    return x, hits, -1


def simulate_series(cfg: SimConfig, sched: SamplingSchedule) -> SimReport:
    """Simulate ``sched.k`` observations and drop the first ``sched.burnin``.

    Each gap is crossed with ``cfg.substeps`` Euler-Maruyama substeps; the
    state is clamped at ``POSITIVE_FLOOR`` (square-root type diffusions) and
    clamps are counted. Returned times start at zero.
    """
    name = cfg.model.name
    if name == "cir":
        kind = _KIND_CIR
    elif name == "icir":
        kind = _KIND_ICIR
    else:
        raise ValueError(f"simulation supports cir and icir, not {name!r}")
    a, b, s = (float(v) for v in cfg.theta)
    gap_rng, noise_rng = _streams(cfg.seed)
    gaps = realize_gaps(sched, gap_rng)

    states = np.empty(sched.k)
    x = float(cfg.x0)
    hits = 0
    per_block = max(1, _CHUNK // cfg.substeps)
    for lo in range(0, sched.k, per_block):
        hi = min(sched.k, lo + per_block)
        z = noise_rng.standard_normal((hi - lo) * cfg.substeps)
        x, h, fail = _em_block(x, kind, a, b, s, gaps[lo:hi], cfg.substeps, z, states[lo:hi], lo * cfg.substeps)
        hits += h
        if fail >= 0:
            raise SimulationError(f"simulation exploded (|x| > {EXPLOSION_BOUND:g}) at substep {fail}")

    times = np.concatenate([[0.0], np.cumsum(gaps)])[1:]
    keep = slice(sched.burnin, None)
    t = times[keep] - times[sched.burnin]
    return SimReport(ObservationSeries(t, states[keep].copy()), hits)
