import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kbqml.discretize import assemble_generator, auto_domain, build_grid, fichera_check
from kbqml.errors import AssemblyError
from kbqml.model import CIR, ICIR, ModelSpec, polynomial_model

TH = (15.0, 3.0, 2.0)
THETAS = [(15.0, 3.0, 2.0), (2.5, 0.8, 0.6)]

BM = polynomial_model("bm", lambda th: (0.0,), lambda th: (th[0] ** 2,), ("sigma",), (True,))


def test_grid_narrow():
    g = build_grid(0.05, 0.15, 15)
    assert g.h == pytest.approx(0.1 / 15, rel=1e-14)
    assert g.nodes.size == 16


def test_grid_unit():
    g = build_grid(0.0, 1.0, 10)
    np.testing.assert_allclose(g.nodes, np.arange(11) / 10, atol=1e-15)


def test_grid_fine():
    g = build_grid(0.05, 0.15, 511)
    assert g.h == pytest.approx(1.9569e-4, rel=1e-4)
    assert g.nodes[-1] == 0.15


@pytest.mark.parametrize("bad", [(0.0, 1.0, 7), (1.0, 1.0, 16), (2.0, 1.0, 16), (0.0, np.inf, 16), (0.0, 1.0, 10.5)])
def test_grid_rejects(bad):
    with pytest.raises(ValueError):
        build_grid(*bad)


def test_auto_domain():
    lo, hi = auto_domain([0.2, 0.5, 0.4])
    assert (lo, hi) == pytest.approx((0.1, 0.75))
    lo, _ = auto_domain([-1.0, 0.5], margin=0.5, floor=1e-6)
    assert lo == 1e-6


# --- Fichera ---


def test_fichera_feller_satisfied():
    rep = fichera_check(CIR, TH, build_grid(0.0, 1.0, 16))["lower"]
    assert rep.value == pytest.approx(43.0, rel=1e-12)
    assert not rep.needs_bc
    assert rep.degenerate


def test_fichera_feller_violated():
    rep = fichera_check(CIR, (1.0, 0.5, 2.0), build_grid(0.0, 1.0, 16))["lower"]
    assert rep.value == pytest.approx(-1.5, rel=1e-12)
    assert rep.needs_bc


def test_fichera_constant_coefficients():
    for rep in fichera_check(BM, (1.3,), build_grid(-1.0, 1.0, 16)).values():
        assert rep.value == 0.0
        assert not rep.needs_bc


def test_fichera_narrow_grid_upper_end():
    # outflow at x = 0.15: a(0.15) - 2 = 40.75 points out of the domain
    rep = fichera_check(CIR, TH, build_grid(0.05, 0.15, 15))["upper"]
    assert rep.value == pytest.approx(-40.75, rel=1e-12)
    assert rep.needs_bc


# --- assembly ---


def test_laplacian_row():
    L = assemble_generator(BM, (math.sqrt(2.0),), build_grid(0.0, 10.0, 10)).matrix
    np.testing.assert_allclose(L[4, 3:6], [1.0, -2.0, 1.0], rtol=1e-14)


def test_cir_row_entries():
    g = build_grid(0.05, 0.15, 10)
    i = 5
    assert g.nodes[i] == pytest.approx(0.1)
    L = assemble_generator(CIR, TH, g).matrix
    # a = 15 (3 - 0.1) = 43.5, b^2 = 0.4, h = 0.01
    np.testing.assert_allclose(L[i, i - 1 : i + 2], [-175.0, -4000.0, 4175.0], rtol=1e-10)


@pytest.mark.parametrize("model", [CIR, ICIR, BM])
def test_constant_vector_in_kernel(model):
    th = (0.7,) if model is BM else TH
    L = assemble_generator(model, th, build_grid(0.2, 1.4, 40)).matrix
    scale = np.abs(L).max(axis=1)
    assert np.all(np.abs(L @ np.ones(41)) <= 1e-12 * scale)


@pytest.mark.parametrize("model", [CIR, ICIR])
@pytest.mark.parametrize("theta", THETAS)
def test_exact_on_linear_and_quadratic(model, theta):
    g = build_grid(0.3, 2.0, 64)
    x = g.nodes
    L = assemble_generator(model, theta, g).matrix
    th = np.array(theta)
    a = model.drift(x, th)
    b2 = model.diff_sq(x, th)
    np.testing.assert_allclose(L @ x, a, rtol=1e-10, atol=1e-10 * np.abs(a).max())
    target = 2 * x * a + b2
    # the one-sided stencils are exact on quadratics, so boundary rows pass too
    np.testing.assert_allclose(L @ x**2, target, rtol=1e-10, atol=1e-10 * np.abs(target).max())


def test_sparsity_pattern():
    g = build_grid(0.3, 2.0, 20)
    L = assemble_generator(CIR, TH, g).matrix
    nz = L != 0
    assert list(np.flatnonzero(nz[0])) == [0, 1, 2, 3]
    assert list(np.flatnonzero(nz[20])) == [17, 18, 19, 20]
    for i in range(1, 20):
        assert list(np.flatnonzero(nz[i])) == [i - 1, i, i + 1]


def test_scale_covariance():
    coarse = assemble_generator(CIR, TH, build_grid(0.05, 0.15, 10)).matrix
    fine = assemble_generator(CIR, TH, build_grid(0.05, 0.15, 20)).matrix
    rc, rf = coarse[5], fine[10]
    # symmetric part carries b^2/(2h^2), antisymmetric part a/(2h)
    sym_c, sym_f = (rc[6] + rc[4]) / 2, (rf[11] + rf[9]) / 2
    anti_c, anti_f = (rc[6] - rc[4]) / 2, (rf[11] - rf[9]) / 2
    assert sym_f == pytest.approx(4 * sym_c, rel=1e-12)
    assert anti_f == pytest.approx(2 * anti_c, rel=1e-12)


def test_assembly_is_deterministic():
    g = build_grid(0.1, 1.0, 33)
    a = assemble_generator(ICIR, TH, g).matrix
    b = assemble_generator(ICIR, TH, g).matrix
    assert np.array_equal(a, b)


def test_assembly_error_names_node():
    spiky = ModelSpec(
        "spiky",
        drift=lambda x, th: 1.0 / (np.asarray(x) - 0.5),
        diffusion=lambda x, th: np.ones_like(np.asarray(x, dtype=float)),
        param_count=1,
        positivity_mask=(False,),
    )
    with pytest.raises(AssemblyError, match="node 5"):
        assemble_generator(spiky, (0.0,), build_grid(0.0, 1.0, 10))


@settings(max_examples=25, deadline=None)
@given(
    st.floats(0.5, 30),
    st.floats(0.2, 5),
    st.floats(0.1, 3),
    st.integers(8, 80),
)
def test_row_sums_property(a, b, s, n):
    L = assemble_generator(CIR, (a, b, s), build_grid(0.1, 4.0, n)).matrix
    scale = np.abs(L).max(axis=1)
    assert np.all(np.abs(L.sum(axis=1)) <= 1e-12 * scale)
