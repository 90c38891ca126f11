"""Acceptance checks, one test per numbered criterion.

Each test records a PASS/FAIL line (printed in the terminal summary) and
then asserts the criterion exactly as stated, at its stated tolerance.
"""

import math
import time

import numpy as np
import pytest

from kbqml.config import ExperimentConfig
from kbqml.discretize import assemble_generator, build_grid, fichera_check
from kbqml.errors import NumericalError
from kbqml.experiments import (
    run_bench,
    run_convergence,
    run_estimation,
    run_estimation_random,
    run_moment_error,
)
from kbqml.interp import spline_fit
from kbqml.model import CIR, ICIR, cir_exact_moments, eval_coefficients
from kbqml.moments import euler_moments, ito_taylor_moments
from kbqml.propagator import build_plan, propagate_columns

TH = (15.0, 3.0, 2.0)
NARROW = (0.05, 0.15)


def rk4(A, U, t, nsteps):
    h = t / nsteps
    for _ in range(nsteps):
        k1 = A @ U
        k2 = A @ (U + 0.5 * h * k1)
        k3 = A @ (U + 0.5 * h * k2)
        k4 = A @ (U + h * k3)
        U = U + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return U


def loglog(h, e):
    return float(np.polyfit(np.log(h), np.log(e), 1)[0])


@pytest.mark.slow
def test_criterion_1_spatial_convergence(tmp_path, criterion):
    cfg = ExperimentConfig.from_text(
        "grid.xmin = 0.05\ngrid.xmax = 0.15\nconvergence.tau = 1/6\n"
        "convergence.n_list = 15, 31, 63, 127, 255, 511\nconvergence.models = cir\n"
    )
    t0 = time.perf_counter()
    res = run_convergence(cfg, tmp_path)
    wall = time.perf_counter() - t0
    slopes = {q: (order, mse_slope, mono) for _, q, order, mse_slope, mono in res["slopes"]}
    ok_rate = all(1.5 <= slopes[q][0] <= 3.0 for q in ("mean", "var"))
    ok_mono = all(slopes[q][2] for q in ("mean", "var"))
    ok = ok_rate and ok_mono and wall < 60
    detail = ", ".join(
        f"{q}: order {slopes[q][0]:.3g} (mse slope {slopes[q][1]:.3g}) monotone={slopes[q][2]}" for q in ("mean", "var")
    )
    criterion(1, ok, f"{detail}; {wall:.1f} s")
    assert ok_rate, detail
    assert ok_mono, detail
    assert wall < 60


def test_criterion_2_moment_accuracy(tmp_path, criterion):
    cfg = ExperimentConfig.from_text(
        "grid.xmin = 0.05\ngrid.xmax = 0.15\ngrid.n = 511\nmoments.tau = 1/6\nmoments.methods = euler, backward\n"
    )
    t0 = time.perf_counter()
    try:
        rows = run_moment_error(cfg, tmp_path)
    except NumericalError as exc:
        criterion(2, False, f"backward run failed: {exc}")
        raise
    wall = time.perf_counter() - t0
    x = np.array(sorted({r[0] for r in rows}))
    w = NARROW[1] - NARROW[0]
    mid = (x >= NARROW[0] + 0.1 * w) & (x <= NARROW[1] - 0.1 * w)
    err = {}
    for meth in ("euler", "backward"):
        sel = sorted((r for r in rows if r[1] == meth), key=lambda r: r[0])
        err[meth] = np.array([[r[2], r[3]] for r in sel])[mid]
    em, ev = cir_exact_moments(TH, x[mid], 1 / 6)
    rel = err["backward"] / np.abs(np.column_stack([em, ev]))
    with np.errstate(invalid="ignore"):
        ok_acc = bool(np.all(rel <= 1e-3))
        ok_gap = bool(np.all(err["euler"] >= 10 * err["backward"]))
    ok = ok_acc and ok_gap and wall < 10
    criterion(2, ok, f"max backward rel err mean {rel[:, 0].max():.3g}, var {rel[:, 1].max():.3g}; "
                     f"euler >= 10x backward at all points: {ok_gap}; {wall:.1f} s")
    assert ok_acc
    assert ok_gap
    assert wall < 10


def test_criterion_3_baseline_identity(criterion):
    x = build_grid(*NARROW, 511).nodes
    me, ve = euler_moments(CIR, TH, x, 1 / 6)
    mi, vi = ito_taylor_moments(CIR, TH, x, 1 / 6, 1)
    var_equal = bool(np.array_equal(vi, ve))
    means_differ = not np.array_equal(mi, me)
    ok = var_equal and means_differ
    criterion(3, ok, f"variance bitwise equal: {var_equal}; means differ: {means_differ} "
                     f"(max |mean gap| {np.abs(mi - me).max():.3g})")
    assert var_equal
    assert means_differ


@pytest.mark.parametrize(
    "dom, delta, multiples",
    [(NARROW, 1 / 252 / 16, (1, 2, 4)), ((0.5, 8.0), 1 / 12 / 16, (1, 4, 16))],
    ids=["narrow", "wide"],
)
def test_criterion_4_time_integration(dom, delta, multiples, criterion):
    t0 = time.perf_counter()
    L = assemble_generator(CIR, TH, build_grid(*dom, 64))
    plan = build_plan(L, delta, max(multiples))
    x = plan.nodes
    U0 = np.column_stack([x, x * x])
    got = propagate_columns(plan, U0, multiples)
    worst, ref, k = 0.0, U0, 0
    for m in multiples:
        while k < m:
            ref = rk4(L.matrix, ref, delta, 1000)
            k += 1
        worst = max(worst, float(np.max(np.abs(got[m] - ref) / np.abs(ref))))
    wall = time.perf_counter() - t0
    ok = worst <= 1e-8 and wall < 5
    criterion(4, ok, f"[{dom[0]}, {dom[1]}] N=64 delta={delta:.3g} multiples {multiples}: "
                     f"max rel diff {worst:.3g}; {wall:.2f} s")
    assert worst <= 1e-8
    assert wall < 5


def test_criterion_5_operator_exactness(criterion):
    worst_row = worst_lin = worst_quad = 0.0
    for model in (CIR, ICIR):
        for theta in ((15.0, 3.0, 2.0), (1.0, 0.5, 2.0)):
            for dom in (NARROW, (0.5, 8.0)):
                L = assemble_generator(model, theta, build_grid(*dom, 128)).matrix
                x = build_grid(*dom, 128).nodes
                a, b = eval_coefficients(model, theta, x)
                b2 = b * b
                scale = np.abs(L).max(axis=1)
                worst_row = max(worst_row, float(np.max(np.abs(L.sum(axis=1)) / scale)))
                worst_lin = max(worst_lin, float(np.max(np.abs(L @ x - a) / np.abs(a).max())))
                tgt = 2 * x * a + b2
                inner = slice(1, -1)
                worst_quad = max(worst_quad, float(np.max(np.abs((L @ x**2 - tgt)[inner]) / np.abs(tgt).max())))
    ok = worst_row <= 1e-12 and worst_lin <= 1e-10 and worst_quad <= 1e-10
    criterion(5, ok, f"row sums {worst_row:.2g}, L x {worst_lin:.2g}, L x^2 {worst_quad:.2g} (relative)")
    assert worst_row <= 1e-12
    assert worst_lin <= 1e-10
    assert worst_quad <= 1e-10


def _summary(res):
    return {(r[0], r[1]): r for r in res["summary"]}


@pytest.mark.slow
def test_criterion_6_fixed_sampling(tmp_path, criterion):
    cfg = ExperimentConfig.from_text("schedule.dt = 1/12\nschedule.k = 1000\nschedule.burnin = 100\n"
                                     "experiment.replications = 20\n")
    res = run_estimation(cfg, tmp_path, seed=cfg.get("experiment.seed"))
    assert sum(1 for r in res["rows"] if r[1] == "backward") == 20
    s = _summary(res)
    rel = {p: abs(s[("backward", p)][7]) / s[("backward", p)][2] for p in ("a", "b", "sigma")}
    ok_bw = all(v <= 0.05 for v in rel.values())
    worse = sum(abs(s[("euler", p)][7]) > abs(s[("backward", p)][7]) for p in ("a", "b", "sigma"))
    ok = ok_bw and worse >= 2
    med = ", ".join(f"{p} {s[('backward', p)][3]:.4g}/{s[('euler', p)][3]:.4g}" for p in ("a", "b", "sigma"))
    criterion(6, ok, f"median backward/euler: {med}; max backward rel bias {max(rel.values()):.3g}; "
                     f"euler worse on {worse}/3")
    assert ok_bw, rel
    assert worse >= 2


@pytest.mark.slow
def test_criterion_7_random_sampling(tmp_path, criterion):
    cfg = ExperimentConfig.from_text("schedule.dt_lo = 1/252\nschedule.dt_hi = 1/6\nexperiment.replications = 20\n")
    res = run_estimation_random(cfg, tmp_path, seed=cfg.get("experiment.seed"))
    s = _summary(res)
    a_med, s_med = s[("backward", "a")][3], s[("backward", "sigma")][3]
    ok_a = abs(a_med - 15.0) <= 1.5
    ok_s = abs(s_med - 2.0) <= 0.2
    criterion(7, ok_a and ok_s, f"backward median a {a_med:.4g}, sigma {s_med:.4g} "
                                f"(euler a {s[('euler', 'a')][3]:.4g}, sigma {s[('euler', 'sigma')][3]:.4g})")
    assert ok_a
    assert ok_s


@pytest.mark.slow
def test_criterion_8_cost_model(tmp_path, criterion):
    cfg = ExperimentConfig.from_text("")
    res = run_bench(cfg, tmp_path)
    assert max(r[0] for r in res["rows"]) == 2_000_000
    fits = {f[0]: f for f in res["fits"]}
    r2 = fits["backward"][3]
    ratio = fits["backward"][5]
    ok = r2 >= 0.99 and ratio <= 2.0
    criterion(8, ok, f"backward R^2 {r2:.4f}, marginal cost ratio vs euler (K >= 1e5) {ratio:.3g}")
    assert r2 >= 0.99
    assert ratio <= 2.0


def test_criterion_9_interpolation_order(criterion):
    hs, errs = [], []
    xq = np.linspace(0.0, np.pi, 20001)
    for n in (32, 64, 128, 256):
        knots = np.linspace(0.0, np.pi, n + 1)
        hs.append(np.pi / n)
        errs.append(np.abs(spline_fit(knots, np.sin(knots))(xq) - np.sin(xq)).max())
    slope = loglog(hs, errs)
    knots = np.linspace(-1.0, 2.0, 9)
    cubic = lambda x: 0.3 - 1.2 * x + 0.7 * x**2 + 0.25 * x**3  # noqa: E731
    xc = np.linspace(-1.0, 2.0, 1001)
    cub_err = float(np.abs(spline_fit(knots, cubic(knots))(xc) - cubic(xc)).max())
    ok = abs(slope - 4.0) <= 0.5 and cub_err <= 1e-10
    criterion(9, ok, f"sin slope {slope:.3f}; cubic max error {cub_err:.2g}")
    assert abs(slope - 4.0) <= 0.5
    assert cub_err <= 1e-10


def test_criterion_10_feller_fichera(criterion):
    grid = build_grid(0.0, 8.0, 64)
    good = fichera_check(CIR, (15.0, 3.0, 2.0), grid)["lower"]
    bad = fichera_check(CIR, (1.0, 0.5, 2.0), grid)["lower"]
    ok = (not good.needs_bc and math.isclose(good.value, 43.0)
          and bad.needs_bc and math.isclose(bad.value, -1.5))
    criterion(10, ok, f"CIR(15,3,2) value {good.value:g} needs_bc={good.needs_bc}; "
                      f"CIR(1,0.5,2) value {bad.value:g} needs_bc={bad.needs_bc}")
    assert not good.needs_bc and good.value == pytest.approx(43.0)
    assert bad.needs_bc and bad.value == pytest.approx(-1.5)
