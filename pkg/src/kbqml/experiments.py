"""Experiment drivers behind the CLI subcommands.

Every driver takes an :class:`ExperimentConfig`, an output directory and a
seed, writes its CSV files and returns the rows it wrote (handy in tests).
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ExperimentConfig
from .csvio import write_csv
from .discretize import build_grid, fichera_check
from .errors import KBQMLError, NumericalError
from .model import cir_exact_moments, get_model
from .moments import BackwardProvider, make_provider
from .qml import NelderMeadOptions, ObservationSeries, default_base_step, default_grid, fit_qml, qml_objective
from .simulate import SamplingSchedule, SimConfig, simulate_series

__all__ = [
    "run_convergence",
    "run_moment_error",
    "run_estimation",
    "run_estimation_random",
    "run_bench",
    "loglog_slope",
    "linear_fit",
    "check_points",
]

PARAM_NAMES = ("a", "b", "sigma")


def _meta(cfg: ExperimentConfig, seed: int, command: str) -> dict:
    return {"command": command, "config_sha256": cfg.digest(), "seed": seed}


def check_points(x_min: float, x_max: float, n: int) -> np.ndarray:
    """``n`` equispaced points covering the middle 80% of ``[x_min, x_max]``."""
    w = x_max - x_min
    return np.linspace(x_min + 0.1 * w, x_max - 0.1 * w, n)


def loglog_slope(h: Sequence[float], err: Sequence[float]) -> float:
    """Least-squares slope of ``log err`` against ``log h`` over finite positive entries."""
    h = np.asarray(h, dtype=float)
    e = np.asarray(err, dtype=float)
    ok = np.isfinite(e) & (e > 0)
    if ok.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(h[ok]), np.log(e[ok]), 1)[0])


def linear_fit(x: Sequence[float], y: Sequence[float]) -> tuple[float, float, float]:
    """Ordinary least squares ``y = c + m x``; returns ``(c, m, r2)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    m, c = np.polyfit(x, y, 1)
    resid = y - (c + m * x)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(c), float(m), r2


# --- spatial convergence ------------------------------------------------------


def _backward_at(model, theta, x_min, x_max, n, tau, pts):
    grid = build_grid(x_min, x_max, n)
    prov = BackwardProvider(model, theta, grid, base_step=tau)
    return prov.moments(pts, np.full(pts.shape, tau))


def _rel_mse(approx, ref) -> float:
    with np.errstate(all="ignore"):
        r = (np.asarray(approx) - ref) / ref
        return float(np.mean(r * r))


def run_convergence(cfg: ExperimentConfig, out_dir: Path, seed: int = 0) -> dict:
    """Relative MSE of backward moments against a reference, per model and grid size.

    CIR is compared with its closed form; other models with the backward
    moments on a ``convergence.ref_n`` grid. Writes ``convergence.csv`` and
    ``convergence_slopes.csv``. ``order`` in the slope file is the log-log
    slope of the root of the relative MSE, ``mse_slope`` that of the MSE.
    """
    theta = cfg.get("model.theta")
    x_min = cfg.get("grid.xmin", 0.05)
    x_max = cfg.get("grid.xmax", 0.15)
    tau = cfg.get("convergence.tau")
    n_list = cfg.get("convergence.n_list")
    ref_n = cfg.get("convergence.ref_n")
    pts = check_points(x_min, x_max, cfg.get("convergence.check_points"))

    rows, slopes = [], []
    for name in cfg.get("convergence.models"):
        model = get_model(name)
        if name == "cir":
            ref_m, ref_v = cir_exact_moments(theta, pts, tau)
            ref_label = "closed_form"
        else:
            ref_m, ref_v = _backward_at(model, theta, x_min, x_max, ref_n, tau, pts)
            ref_label = f"n{ref_n}"
        hs, em, ev = [], [], []
        for n in n_list:
            h = (x_max - x_min) / n
            try:
                m, v = _backward_at(model, theta, x_min, x_max, n, tau, pts)
                mse_m, mse_v = _rel_mse(m, ref_m), _rel_mse(v, ref_v)
            except NumericalError:
                mse_m = mse_v = math.nan
            rows.append((name, n, h, mse_m, mse_v, ref_label))
            hs.append(h)
            em.append(mse_m)
            ev.append(mse_v)
        for q, e in (("mean", em), ("var", ev)):
            s = loglog_slope(hs, e)
            e_arr = np.asarray(e)
            monotone = bool(np.all(np.isfinite(e_arr)) and np.all(np.diff(e_arr) < 0))
            slopes.append((name, q, s / 2.0, s, monotone))

    out = Path(out_dir)
    meta = _meta(cfg, seed, "convergence")
    write_csv(out / "convergence.csv", ("model", "n_x", "h", "rel_mse_mean", "rel_mse_var", "reference"), rows, meta)
    write_csv(out / "convergence_slopes.csv", ("model", "quantity", "order", "mse_slope", "monotone"), slopes, meta)
    return {"rows": rows, "slopes": slopes}


# --- moment error map ---------------------------------------------------------


def run_moment_error(cfg: ExperimentConfig, out_dir: Path, seed: int = 0) -> list[tuple]:
    """Absolute errors of several moment methods against the CIR closed form, at the grid nodes."""
    model = get_model(cfg.get("model.name", "cir"))
    if model.name != "cir":
        raise KBQMLError("moments-error needs the cir model (closed-form reference)")
    theta = cfg.get("model.theta")
    tau = cfg.get("moments.tau")
    grid = build_grid(cfg.get("grid.xmin", 0.05), cfg.get("grid.xmax", 0.15), cfg.get("grid.n", 511))
    x = grid.nodes
    ex_m, ex_v = cir_exact_moments(theta, x, tau)
    dt = np.full(x.shape, tau)
    rows = []
    for method in cfg.get("moments.methods"):
        prov = make_provider(method, model, theta, grid=grid, base_step=cfg.get("prop.base_step", tau))
        m, v = prov.moments(x, dt)
        for xi, mi, vi, emi, evi in zip(x, m, v, ex_m, ex_v):
            rows.append((xi, method, abs(mi - emi), abs(vi - evi)))
    write_csv(Path(out_dir) / "moments_error.csv", ("x", "method", "abs_err_mean", "abs_err_var"), rows,
              _meta(cfg, seed, "moments-error"))
    return rows


# --- estimation replications --------------------------------------------------


@dataclass(frozen=True)
class _RepJob:
    replicate: int
    seed: int
    model: str
    theta: tuple
    x0: float
    substeps: int
    schedule: SamplingSchedule
    methods: tuple
    init: tuple
    grid_n: int
    grid_bounds: tuple | None
    margin: float
    base_step: float | None
    options: NelderMeadOptions
    dense_dt: float | None


FIT_HEADER = ("replicate", "method", "a", "b", "sigma", "loglik", "converged", "termination",
              "iterations", "evals", "wall_ms")


def _fit_row(rep, method, series, model, job: _RepJob):
    grid = base = None
    if method == "backward":
        if job.grid_bounds is not None:
            grid = build_grid(job.grid_bounds[0], job.grid_bounds[1], job.grid_n)
        else:
            grid = default_grid(series, model, job.grid_n, job.margin)
        base = job.base_step or default_base_step(series)
    t0 = time.perf_counter()
    try:
        fit = fit_qml(series, model, method, job.init, grid=grid, base_step=base, options=job.options)
    except KBQMLError as exc:
        ms = (time.perf_counter() - t0) * 1e3
        return (rep, method, math.nan, math.nan, math.nan, math.nan, False, type(exc).__name__, 0, 0, ms)
    ms = (time.perf_counter() - t0) * 1e3
    a, b, s = (float(v) for v in fit.theta)
    return (rep, method, a, b, s, fit.loglik, fit.converged, fit.termination_reason.value,
            fit.iterations, fit.function_evals, ms)


def _run_replicate(job: _RepJob) -> list[tuple]:
    model = get_model(job.model)
    sim = SimConfig(model, job.theta, job.x0, job.substeps, seed=job.seed)
    series = simulate_series(sim, job.schedule).series
    rows = [_fit_row(job.replicate, m, series, model, job) for m in job.methods]
    if job.dense_dt:
        s = job.schedule
        dense = SamplingSchedule("fixed", s.k, s.burnin, dt=job.dense_dt)
        dseries = simulate_series(sim, dense).series
        row = _fit_row(job.replicate, "euler", dseries, model, job)
        rows.append((row[0], "euler_dense") + row[2:])
    return rows


def summarize(rows: Sequence[tuple], theta_true: Sequence[float]) -> list[tuple]:
    """Per (method, parameter) median and IQR over converged fits."""
    out = []
    for method in dict.fromkeys(r[1] for r in rows):
        sel = [r for r in rows if r[1] == method]
        ok = [r for r in sel if r[6]]
        for j, p in enumerate(PARAM_NAMES):
            v = np.array([r[2 + j] for r in ok], dtype=float)
            if v.size:
                q25, med, q75 = np.percentile(v, [25, 50, 75])
            else:
                q25 = med = q75 = math.nan
            out.append((method, p, theta_true[j], med, q25, q75, q75 - q25, med - theta_true[j],
                        len(ok), len(sel) - len(ok)))
    return out


SUMMARY_HEADER = ("method", "parameter", "truth", "median", "q25", "q75", "iqr", "median_bias",
                  "n_converged", "n_failed")


def _replications(cfg: ExperimentConfig, out_dir: Path, seed: int, command: str, stem: str) -> dict:
    theta = tuple(cfg.get("model.theta"))
    kind = cfg.get("schedule.kind")
    k = cfg.get("schedule.k")
    burnin = cfg.get("schedule.burnin")
    if kind == "fixed":
        sched = SamplingSchedule("fixed", k, burnin, dt=cfg.get("schedule.dt"))
    else:
        sched = SamplingSchedule(kind, k, burnin, dt_lo=cfg.get("schedule.dt_lo"), dt_hi=cfg.get("schedule.dt_hi"))
    xmin, xmax = cfg.get("grid.xmin"), cfg.get("grid.xmax")
    opts = NelderMeadOptions(max_iter=cfg.get("optim.max_iter"), xtol=cfg.get("optim.xtol"), ftol=cfg.get("optim.ftol"))
    jobs = [
        _RepJob(
            replicate=r, seed=seed + r, model=cfg.get("model.name"), theta=theta, x0=cfg.get("sim.x0"),
            substeps=cfg.get("sim.substeps"), schedule=sched, methods=tuple(cfg.get("estimate.methods")),
            init=tuple(cfg.get("estimate.init")), grid_n=cfg.get("grid.n"),
            grid_bounds=None if xmin is None or xmax is None else (xmin, xmax),
            margin=cfg.get("grid.auto_margin"), base_step=cfg.get("prop.base_step"), options=opts,
            dense_dt=cfg.get("estimate.dense_dt"),
        )
        for r in range(cfg.get("experiment.replications"))
    ]
    workers = max(1, cfg.get("experiment.workers"))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_replicate, jobs))
    else:
        results = [_run_replicate(j) for j in jobs]
    rows = [row for rep in results for row in rep]
    summary = summarize(rows, theta)
    meta = _meta(cfg, seed, command)
    out = Path(out_dir)
    write_csv(out / f"{stem}.csv", FIT_HEADER, rows, meta)
    write_csv(out / f"{stem}_summary.csv", SUMMARY_HEADER, summary, meta)
    return {"rows": rows, "summary": summary}


def run_estimation(cfg: ExperimentConfig, out_dir: Path, seed: int = 0) -> dict:
    """Replicated fits on fixed-interval iCIR data (defaults)."""
    cfg = cfg.with_defaults(model__name="icir", schedule__kind="fixed")
    return _replications(cfg, out_dir, seed, "estimate", "estimation")


def run_estimation_random(cfg: ExperimentConfig, out_dir: Path, seed: int = 0) -> dict:
    """Replicated fits on CIR data with uniformly random sampling gaps (defaults)."""
    cfg = cfg.with_defaults(model__name="cir", schedule__kind="uniform")
    return _replications(cfg, out_dir, seed, "estimate-random", "estimation_random")


# --- cost benchmark -----------------------------------------------------------


def _time_objective(series: ObservationSeries, model, theta, method, grid_n, margin, base_step):
    """One objective evaluation; returns ``(setup_ms, total_ms)``."""
    t0 = time.perf_counter()
    if method == "backward":
        grid = default_grid(series, model, grid_n, margin)
        prov = BackwardProvider(model, theta, grid, base_step or default_base_step(series))
        prov.plan  # noqa: B018 - forces assembly and the matrix exponential
    else:
        prov = make_provider(method, model, theta)
    t1 = time.perf_counter()
    qml_objective(series, prov)
    t2 = time.perf_counter()
    return (t1 - t0) * 1e3, (t2 - t0) * 1e3


def run_bench(cfg: ExperimentConfig, out_dir: Path, seed: int = 0) -> dict:
    """Wall time of a single likelihood evaluation against the number of observations.

    Each point is the median over ``bench.repeats`` timed calls after one
    untimed warm-up call.
    """
    cfg = cfg.with_defaults(model__name="icir")
    model = get_model(cfg.get("model.name"))
    theta = tuple(cfg.get("model.theta"))
    k_list = sorted(cfg.get("bench.k_list"))
    repeats = cfg.get("bench.repeats")
    burnin = cfg.get("schedule.burnin")
    sched = SamplingSchedule("fixed", k_list[-1] + 1 + burnin, burnin, dt=cfg.get("schedule.dt"))
    sim = SimConfig(model, theta, cfg.get("sim.x0"), cfg.get("bench.substeps"), seed=seed)
    full = simulate_series(sim, sched).series

    rows = []
    for k in k_list:
        series = ObservationSeries(full.times[: k + 1], full.states[: k + 1])
        for method in cfg.get("bench.methods"):
            args = (series, model, theta, method, cfg.get("grid.n"), cfg.get("grid.auto_margin"),
                    cfg.get("prop.base_step"))
            _time_objective(*args)  # warm-up: first-touch of buffers and JIT dispatch
            timed = np.array([_time_objective(*args) for _ in range(repeats)])
            tot = float(np.median(timed[:, 1]))
            rows.append((k, method, tot, tot / k, float(np.median(timed[:, 0]))))

    fits = []
    marginal = {}
    for method in cfg.get("bench.methods"):
        sel = [r for r in rows if r[1] == method]
        c, m, r2 = linear_fit([r[0] for r in sel], [r[2] for r in sel])
        big = [r for r in sel if r[0] >= 100_000]
        m_big = linear_fit([r[0] for r in big], [r[2] for r in big])[1] if len(big) >= 2 else math.nan
        marginal[method] = m_big
        fits.append([method, c, m, r2, m_big])
    ref = marginal.get("euler", math.nan)
    for f in fits:
        f.append(f[4] / ref if ref and math.isfinite(ref) else math.nan)

    meta = _meta(cfg, seed, "bench")
    out = Path(out_dir)
    write_csv(out / "bench.csv", ("k", "method", "wall_ms_total", "wall_ms_per_obs", "wall_ms_setup"), rows, meta)
    write_csv(out / "bench_fit.csv",
              ("method", "intercept_ms", "slope_ms_per_obs", "r2", "marginal_ms_per_obs_k_ge_1e5", "marginal_ratio_vs_euler"),
              fits, meta)
    return {"rows": rows, "fits": fits}


def boundary_warnings(model, theta, grid) -> list[str]:
    """Human-readable notes for grid ends where the generator needs a boundary condition."""
    msgs = []
    for side, rep in fichera_check(model, theta, grid).items():
        if rep.needs_bc:
            msgs.append(f"{side} boundary x={rep.x:g}: Fichera value {rep.value:g} < 0, "
                        "a boundary condition would be required; moments near this end are unreliable")
    return msgs
