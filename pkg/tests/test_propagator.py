import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from kbqml.discretize import DiscretizedGenerator, assemble_generator, build_grid
from kbqml.errors import MatrixExpError
from kbqml.model import CIR, cir_exact_moments, polynomial_model
from kbqml.propagator import (
    MomentVectors,
    build_plan,
    choose_substeps,
    conditional_variance,
    matrix_exp,
    propagate_columns,
    propagate_moments,
)

TH = (15.0, 3.0, 2.0)
WIDE = (0.5, 8.0)  # data-covering domain for CIR(15, 3, 2)
BM = polynomial_model("bm", lambda th: (0.0,), lambda th: (th[0] ** 2,), ("sigma",), (True,))


def rk4(A, U, t, nsteps):
    h = t / nsteps
    for _ in range(nsteps):
        k1 = A @ U
        k2 = A @ (U + 0.5 * h * k1)
        k3 = A @ (U + 0.5 * h * k2)
        k4 = A @ (U + h * k3)
        U = U + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return U


def plan_for(model, theta, dom, n, delta, max_multiple=64):
    L = assemble_generator(model, theta, build_grid(*dom, n))
    return build_plan(L, delta, max_multiple)


# --- matrix exponential ---


def test_exp_of_zero_is_identity():
    np.testing.assert_array_equal(matrix_exp(np.zeros((5, 5)), 3.0), np.eye(5))


def test_exp_scalar():
    assert matrix_exp(np.array([[-2.0]]), 0.5)[0, 0] == pytest.approx(math.exp(-1.0), rel=1e-14)


def test_exp_nilpotent():
    tau = 0.37
    out = matrix_exp(np.array([[0.0, tau], [0.0, 0.0]]))
    np.testing.assert_allclose(out, [[1.0, tau], [0.0, 1.0]], rtol=0, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(float, (6, 6), elements=st.floats(-20, 20)), st.floats(1e-3, 2.0))
def test_exp_matches_scipy(M, tau):
    ref = scipy.linalg.expm(M * tau)
    got = matrix_exp(M, tau)
    scale = np.abs(ref).max()
    # absolute error relative to the largest entry; tighter for well-behaved inputs
    assert np.abs(got - ref).max() <= 1e-11 * max(scale, 1.0) * max(1.0, np.abs(M).sum(axis=1).max() * tau)


def test_exp_overflow_names_norm():
    with pytest.raises(MatrixExpError, match="inf"):
        matrix_exp(np.array([[1e6]]), 1.0)


@pytest.mark.parametrize("product, m", [(8.0, 8), (0.5, 1), (100.0, 128), (1.0, 1), (0.0, 1)])
def test_choose_substeps(product, m):
    assert choose_substeps(product, 1.0) == m
    assert choose_substeps(product / 4, 4.0) == m


# --- plans ---


def test_zero_generator_plan_is_identity():
    g = build_grid(0.0, 1.0, 10)
    L = DiscretizedGenerator(np.zeros((11, 11)), g, (), "zero")
    np.testing.assert_array_equal(build_plan(L, 0.7, 5).E_base, np.eye(11))


def test_row_sums_on_covering_domain():
    p = plan_for(CIR, TH, WIDE, 127, 1 / 252)
    assert p.row_sum_deviation() <= 1e-9


def test_row_sum_diagnostic_on_narrow_grid():
    # outflow at x_max = 0.15 makes this operator badly conditioned; the
    # diagnostic exists to expose exactly this
    p = plan_for(CIR, TH, (0.05, 0.15), 127, 1 / 252)
    assert p.row_sum_deviation() > 1e-9


def test_semigroup_against_scipy():
    L = assemble_generator(CIR, TH, build_grid(*WIDE, 63)).matrix
    half = scipy.linalg.expm(L / 504)
    full = matrix_exp(L, 1 / 252)
    np.testing.assert_allclose(half @ half, full, rtol=1e-10, atol=1e-10 * np.abs(full).max())


def test_plan_validation():
    L = assemble_generator(CIR, TH, build_grid(*WIDE, 16))
    with pytest.raises(ValueError):
        build_plan(L, 0.0, 4)
    with pytest.raises(ValueError):
        build_plan(L, 0.1, 0)


# --- propagation ---


def test_multiple_zero_is_identity():
    p = plan_for(CIR, TH, WIDE, 32, 1 / 192)
    x = p.nodes
    out = propagate_moments(p, [0, 3])
    np.testing.assert_array_equal(out[0].u1, x)
    np.testing.assert_array_equal(out[0].u2, x * x)
    assert out[3].elapsed == pytest.approx(3 / 192)


def test_multiple_out_of_range():
    p = plan_for(CIR, TH, WIDE, 32, 0.01, max_multiple=8)
    with pytest.raises(ValueError):
        propagate_moments(p, [9])
    with pytest.raises(ValueError):
        propagate_moments(p, [-1])


def test_cir_mean_on_covering_domain():
    p = plan_for(CIR, TH, WIDE, 255, 1 / 96, max_multiple=16)
    mv = propagate_moments(p, [16])[16]
    x = p.nodes
    mean, var = cir_exact_moments(TH, x, 1 / 6)
    mid = slice(26, 230)
    np.testing.assert_allclose(mv.u1[mid], mean[mid], rtol=1e-8)
    v, _ = conditional_variance(mv)
    np.testing.assert_allclose(v[mid], var[mid], rtol=1e-6)


def test_brownian_moments():
    sigma, dt = 0.8, 0.05
    p = plan_for(BM, (sigma,), (-3.0, 3.0), 120, dt, max_multiple=1)
    mv = propagate_moments(p, [1])[1]
    inner = slice(10, 111)
    np.testing.assert_allclose(mv.u1[inner], p.nodes[inner], atol=1e-10)
    v, _ = conditional_variance(mv)
    np.testing.assert_allclose(v[inner], sigma**2 * dt, rtol=1e-8)


def test_constants_preserved():
    p = plan_for(CIR, TH, WIDE, 64, 1 / 252, max_multiple=40)
    ones = np.ones((65, 1))
    for k, U in propagate_columns(p, ones, [1, 7, 40]).items():
        np.testing.assert_allclose(U, 1.0, atol=1e-9)


def test_doubling_is_bitwise_consistent():
    p = plan_for(CIR, TH, WIDE, 64, 1 / 252, max_multiple=40)
    x = p.nodes
    U0 = np.column_stack([x, x * x])
    both = propagate_columns(p, U0, [10, 20])
    again = propagate_columns(p, both[10], [10])[10]
    assert np.array_equal(both[20], again)


def test_u1_affine_for_cir():
    p = plan_for(CIR, TH, WIDE, 64, 1 / 192, max_multiple=16)
    u1 = propagate_moments(p, [16])[16].u1
    x = p.nodes
    c = np.polyfit(x[1:-1], u1[1:-1], 1)
    resid = u1[1:-1] - np.polyval(c, x[1:-1])
    assert np.abs(resid).max() <= 1e-8 * np.abs(u1).max()


@pytest.mark.parametrize(
    "dom, delta, multiples",
    [
        ((0.05, 0.15), 1 / 252 / 16, (1, 2, 4)),
        (WIDE, 1 / 12 / 16, (1, 4, 16)),
    ],
)
def test_exponential_matches_rk4(dom, delta, multiples):
    p = plan_for(CIR, TH, dom, 64, delta)
    x = p.nodes
    U0 = np.column_stack([x, x * x])
    got = propagate_columns(p, U0, multiples)
    ref, k = U0, 0
    for m in multiples:
        while k < m:
            ref = rk4(p.generator.matrix, ref, delta, 1000)
            k += 1
        np.testing.assert_allclose(got[m], ref, rtol=1e-8)


# --- variance ---


def test_zero_variance_is_floored():
    v, n = conditional_variance(MomentVectors(np.array([1.0, 2.0]), np.array([1.0, 4.0]), 0.1))
    np.testing.assert_array_equal(v, [1e-12, 4e-12])
    assert n == 2


def test_unit_variance():
    v, n = conditional_variance(MomentVectors(np.array([0.0]), np.array([1.0]), 0.1))
    assert v[0] == 1.0 and n == 0
