import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crembed.cech import (
    CechError, Cochain, MockSections, chi, dbar, global_solve_1, global_solve_2, homotopy, ne_search,
    overlaps, q2, rho, sw_potential, sw_search,
)


@pytest.fixture(scope="module")
def space():
    return MockSections()


def random_cochain(space, j, k, level, rng, integer=False):
    vals = {}
    for I in overlaps(space, j, level):
        v = rng.integers(-9, 10, space.dim(k)).astype(float) if integer else rng.normal(size=space.dim(k))
        vals[I] = np.where(space.mask(I, level, k), v, 0.0)
    return Cochain(j, k, level, vals)


def random_cr_coboundary(space, rng):
    # locally constant 1-cochain of functions, then its coboundary
    beta = Cochain(1, 0, 1, {I: rng.normal() * space.mask(I, 1, 0).astype(float) for I in overlaps(space, 1, 1)})
    return rho(beta, space), beta


def test_fixture_cohomology(space):
    # hollow cube: connected, H^1 = 0, H^2 = 1
    assert space.betti() == [1, 0, 1, 0]


@pytest.mark.parametrize("j", [0, 1, 2])
def test_rho_squared_is_exactly_zero(space, j):
    rng = np.random.default_rng(j)
    c = random_cochain(space, j, 1, 1, rng, integer=True)
    assert rho(rho(c, space), space).max_abs() == 0.0


@pytest.mark.parametrize("j", [1, 2])
def test_rho_chi_is_identity_on_closed_cochains(space, j):
    rng = np.random.default_rng(10 + j)
    a = rho(random_cochain(space, j - 1, 0, 1, rng), space)
    assert rho(chi(a, space), space).combine(a, 1.0, -1.0).max_abs() < 1e-12


def test_dbar_commutes_with_rho(space):
    c = random_cochain(space, 1, 0, 2, np.random.default_rng(3))
    lhs = dbar(rho(c, space), space)
    rhs = rho(dbar(c, space), space)
    assert lhs.combine(rhs, 1.0, -1.0).max_abs() < 1e-12


def test_sw_search_output_is_closed_and_matches_potential(space):
    rng = np.random.default_rng(4)
    alpha, beta = random_cr_coboundary(space, rng)
    h = sw_search(alpha, space)
    assert np.max(np.abs(space.dbar(h, 2))) < 1e-12
    g = sw_potential(alpha, beta, space)
    assert np.max(np.abs(space.dbar(g, 1) - h)) < 1e-12


def test_q2_contract_on_random_coboundaries(space):
    rng = np.random.default_rng(5)
    for _ in range(50):
        alpha, _ = random_cr_coboundary(space, rng)
        out = q2(alpha, space)
        assert rho(out, space).combine(alpha.restrict(space, out.level), 1.0, -1.0).max_abs() < 1e-12
        # the output consists of CR sections
        assert dbar(out, space).max_abs() < 1e-12


def test_ne_search_produces_cr_cocycle_with_primitive(space):
    rng = np.random.default_rng(6)
    g = rng.normal(size=space.dim(1))
    alpha, beta, _ = ne_search(space.dbar(g, 1), space, g)
    assert dbar(alpha, space).max_abs() < 1e-12
    assert dbar(beta, space).max_abs() < 1e-12
    assert rho(beta, space, alpha.level).combine(alpha, 1.0, -1.0).max_abs() < 1e-12


@pytest.mark.parametrize("r", [1, 2])
def test_global_solvers_invert_dbar_on_exact_data(space, r):
    rng = np.random.default_rng(7 + r)
    g = rng.normal(size=space.dim(r - 1))
    h = space.dbar(g, r - 1)
    solve = global_solve_1 if r == 1 else global_solve_2
    assert np.max(np.abs(space.dbar(solve(h, space), r - 1) - h)) < 1e-10


def test_non_exact_data_is_rejected(space):
    # a generic closed 2-cochain on the hollow cube has a nonzero H^2 class
    z = np.random.default_rng(8).normal(size=space.dim(2))
    with pytest.raises(CechError):
        global_solve_2(z, space)


def test_homotopy_identity_on_random_inputs(space):
    rng = np.random.default_rng(9)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        h = rng.normal(size=space.dim(1))
        P, Q = homotopy(h, space)
        worst = max(worst, np.max(np.abs(h - space.dbar(P, 0) - Q)))
    assert worst < 1e-10
    assert time.perf_counter() - t0 < 30


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 16))
def test_homotopy_operators_are_linear(space, a, b, seed):
    rng = np.random.default_rng(seed)
    h1, h2 = rng.normal(size=(2, space.dim(1)))
    P1, Q1 = homotopy(h1, space)
    P2, Q2 = homotopy(h2, space)
    P, Q = homotopy(a * h1 + b * h2, space)
    assert np.allclose(P, a * P1 + b * P2, atol=1e-9)
    assert np.allclose(Q, a * Q1 + b * Q2, atol=1e-9)
