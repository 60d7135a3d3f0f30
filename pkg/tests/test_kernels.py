import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crembed.barrier import build_barrier, find_adjusted_pair
from crembed.geometry import GraphManifold, quadric
from crembed.kernels import (
    BallDomain, CFConfig, LocalSolver, QuadratureError, TubeDomain, TubeOperators, bm_reproduce,
    cf_prefactor, cr_extend, extrapolate_eps, form_layout, integrate_form,
)
from crembed.polynomial import Poly


def parabola():
    # x_1 = |z_1|^2 / 2 in C^2, a hypersurface with no Levi directions to test
    n = 2
    return GraphManifold(n, 1, [Poly.z(1, n) * Poly.zbar(1, n) * 0.5], allow_low_rank=True)


HOLOMORPHIC = [
    lambda w: 1 + 0 * w[..., 0],
    lambda w: w[..., 0] ** 2 * w[..., 1] + 1,
    lambda w: np.exp(w[..., 0] - w[..., 1]),
    lambda w: (1 + w[..., 1]) ** 3,
    lambda w: w[..., 0] ** 4 - 2j * w[..., 1] + 0.5,
]


def test_prefactor_degree_zero_in_c1_is_cauchy():
    # (1/2 pi i) with the orientation sign for n = 1
    assert cf_prefactor(1, 0) == pytest.approx(1 / (2j * np.pi))


def test_bochner_martinelli_reproduces_holomorphic_polynomials():
    c = np.array([0.1 + 0.05j, -0.2j])
    ball = BallDomain(c, 1.0, CFConfig())
    zs = [c, c + [0.3, 0.2j], c + [-0.5 + 0.1j, 0.3], c + [0.1j, -0.6], c + [0.4, 0.4]]
    t0 = time.perf_counter()
    worst = max(abs(bm_reproduce(ball, g, z) - g(z)) / abs(g(z)) for g in HOLOMORPHIC for z in zs)
    assert worst <= 0.01
    assert time.perf_counter() - t0 < 300


def test_bochner_martinelli_converges_with_budget():
    c = np.zeros(2, complex)
    g, z = HOLOMORPHIC[2], np.array([0.3, -0.2j])
    errs = [abs(bm_reproduce(BallDomain(c, 1.0, CFConfig(sphere=s)), g, z) - g(z)) for s in (6, 10)]
    assert errs[1] < 0.1 * errs[0]


def test_form_layout_pairs_complementary_slots_with_opposite_signs():
    from crembed.forms import FormMonomial
    monos = [FormMonomial(dzetabar=(1,)), FormMonomial(dzetabar=(2,))]
    lay = form_layout(2, 1, monos)
    # repeated dzetabar_j factors vanish, leaving the two complementary pairings
    assert sorted((Kg, p) for Kg, p, *_ in lay) == [((1,), 1), ((2,), 0)]
    assert all(J == (1, 2) and K == () and L == () for *_, J, K, L in lay)
    assert lay[0][2] == -lay[1][2]


def test_zero_data_gives_zero_everywhere():
    M = parabola()
    ops = TubeOperators(TubeDomain(M, np.zeros(2, complex), 0.5, build_barrier(M, 0), CFConfig(sphere=6)))
    z = M.point(np.array([0.05, 0.1, -0.07]))
    zero1 = lambda w: {(1,): 0 * w[..., 0], (2,): 0 * w[..., 0]}
    zero0 = lambda w: {(): 0 * w[..., 0]}
    for out in [ops.T(zero1, 1, z, 0.05), ops.R(zero1, 1, z, 0.05), ops.S(zero0, 0, z, 0.05), ops.H(zero0, 0, z, 0.05)]:
        assert all(v == 0 for v in out.values())


def test_masked_nodes_do_not_change_the_integral():
    # g supported on half the sphere: masking must equal the unmasked sum of zeros and nonzeros
    ball = BallDomain(np.zeros(2, complex), 1.0, CFConfig(sphere=8))
    z = np.array([0.2, 0.1j])
    from crembed.forms import bochner_martinelli
    nodes = ball.boundary(z)
    half = lambda w: {(): np.where(w[..., 0].real > 0, w[..., 1] + 1, 0)}
    smooth_half = lambda w: {(): np.where(w[..., 0].real > 0, w[..., 1] + 1, 1e-300)}
    a = integrate_form(ball.chart, nodes, z, half, 0, bochner_martinelli(2), 0)[()]
    b = integrate_form(ball.chart, nodes, z, smooth_half, 0, bochner_martinelli(2), 0)[()]
    assert abs(a - b) < 1e-12 * abs(a)


def test_t_operator_decays_like_eps_log_eps():
    M = parabola()
    ops = TubeOperators(TubeDomain(M, np.zeros(2, complex), 0.5, None, CFConfig(sphere=8)))
    dg = lambda w: {(1,): np.conj(w[..., 1]) + 1, (2,): w[..., 0] + 0.5}
    z = M.point(np.array([0.05, 0.1, -0.07]))
    eps = 0.1 / 2 ** np.arange(6)
    t0 = time.perf_counter()
    vals = []
    for e in eps:
        Tv, Ts = ops.T(dg, 1, z, e, parts=True)
        vals.append(abs(Tv.get((), 0) + Ts.get((), 0)))
    vals, X = np.array(vals), eps * np.abs(np.log(eps))
    K = (X @ vals) / (X @ X)
    r2 = 1 - np.sum((vals - K * X) ** 2) / np.sum((vals - vals.mean()) ** 2)
    assert r2 >= 0.95
    assert time.perf_counter() - t0 < 300


@pytest.mark.slow
def test_homotopy_identity_in_c2():
    M = parabola()
    ops = TubeOperators(TubeDomain(M, np.zeros(2, complex), 0.5, build_barrier(M, 0), CFConfig(sphere=8)))
    g = lambda w: w[..., 0] * np.conj(w[..., 1]) + w[..., 1] ** 2 + 1
    gf = lambda w: {(): g(w)}
    dg = lambda w: {(1,): 0 * w[..., 0], (2,): w[..., 0]}
    z = M.point(np.array([0.05, 0.1, -0.07]))
    eps = 0.1
    parts = [ops.T(dg, 1, z, eps), ops.R(dg, 1, z, eps), ops.S(gf, 0, z, eps), ops.H(gf, 0, z, eps)]
    total = sum(p.get((), 0) for p in parts)
    assert abs(total - g(z)) < 0.03 * abs(g(z))


def test_extrapolation_recovers_eps_log_eps_model():
    eps = np.array([0.04, 0.02, 0.01, 0.005])
    v = (2 - 1j) + 3.0 * eps * np.log(eps)
    v0, info = extrapolate_eps(v[:, None], eps)
    assert abs(v0[0] - (2 - 1j)) < 1e-12 and info["fit_residual"] < 1e-12


def test_extrapolation_rejects_stalled_ladder():
    eps = np.array([0.04, 0.02, 0.01])
    with pytest.raises(QuadratureError):
        extrapolate_eps(np.array([[1.0], [2.0], [3.0]]), eps)


@settings(max_examples=25, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5))
def test_extrapolation_is_linear(a, b, c):
    eps = np.array([0.04, 0.02, 0.01, 0.005])
    v1 = 1 + eps * np.log(eps)
    v2 = np.sqrt(eps) * 0.1 + 1j
    lhs, _ = extrapolate_eps((a * v1 + b * v2 + c)[:, None], eps, ratio_max=np.inf)
    r1, _ = extrapolate_eps(v1[:, None], eps, ratio_max=np.inf)
    r2, _ = extrapolate_eps(v2[:, None], eps, ratio_max=np.inf)
    assert abs(lhs[0] - (a * r1[0] + b * r2[0] + c)) < 1e-9 * (1 + abs(a) + abs(b) + abs(c))


@pytest.fixture(scope="module")
def q11_patch():
    M = quadric([-1, 1], name="quadric11")
    b = build_barrier(M, 1)
    c0 = M.point(np.array([0, 0.3, 0, 0, 0.0]))
    pair = find_adjusted_pair(b, c0, 0.4)
    cfg = CFConfig(sphere=8192, p_simplex=4, seed=1, eps_ladder=(0.02, 0.01, 0.005))
    ops = TubeOperators(TubeDomain(M, c0, 0.4, b, cfg))
    rng = np.random.default_rng(0)
    pts = [M.point(M.coords(c0[None])[0] + rng.uniform(-1, 1, 5) * pair.r * 0.4)
           + 0.4 * pair.r * np.array([rng.uniform(-1, 1), 0, 0]) for _ in range(2)]
    return M, ops, pair, pts


@pytest.mark.slow
def test_extension_reproduces_constants(q11_patch):
    _, ops, _, pts = q11_patch
    for z in pts:
        v, _ = cr_extend(ops, lambda w: np.ones(w.shape[:-1], complex), z)
        assert abs(v - 1) < 0.01


@pytest.mark.slow
def test_extension_of_restricted_polynomial(q11_patch):
    _, ops, _, pts = q11_patch
    f = lambda w: w[..., 1] ** 2
    for z in pts:
        v, _ = cr_extend(ops, f, z)
        assert abs(v - f(z)) <= 0.02 * abs(f(z))


@pytest.mark.slow
def test_extension_is_holomorphic_off_the_manifold(q11_patch):
    _, ops, _, pts = q11_patch
    z, step = pts[0], 5e-3
    # noise floor from the constant, whose extension has zero derivative
    def dbar(f):
        out = []
        for j in range(3):
            e = np.zeros(3, complex)
            e[j] = step
            dx = (cr_extend(ops, f, z + e)[0] - cr_extend(ops, f, z - e)[0]) / (2 * step)
            dy = (cr_extend(ops, f, z + 1j * e)[0] - cr_extend(ops, f, z - 1j * e)[0]) / (2 * step)
            out.append(0.5 * (dx + 1j * dy))
        return np.max(np.abs(out)), out
    floor, _ = dbar(lambda w: np.ones(w.shape[:-1], complex))
    f = lambda w: w[..., 1] ** 2
    res, _ = dbar(f)
    assert res <= 10 * max(floor, 1e-6)


def test_local_solver_rejects_degree_out_of_range():
    M = quadric([-1, 1], name="quadric11")
    b = build_barrier(M, 1)
    solver = LocalSolver(TubeOperators(TubeDomain(M, np.zeros(3, complex), 0.4, b, CFConfig(sphere=16))), 0.05)
    with pytest.raises(ValueError):
        solver.solve(lambda w: {(1,): 0 * w[..., 0]}, 1, np.zeros(3, complex))


@pytest.fixture(scope="module")
def q22_solver():
    M = quadric([-1, -1, 1, 1], name="quadric22", grid=[3] * 9)
    b = build_barrier(M, 2)
    cfg = CFConfig(sphere=64, p_radial=4, p_simplex=2, seed=1, eps_ladder=(0.02, 0.01, 0.005))
    # crude budget: these tests check structure, not convergence
    return M, LocalSolver(TubeOperators(TubeDomain(M, np.zeros(5, complex), 0.4, b, cfg)), 0.05, ratio_max=np.inf)


def bump_form(M, center, a=0.1):
    # dbar of a bump times a linear function, supported in a small graph ball
    def field(zeta):
        u = M.coords(zeta) - center
        s = np.sum(u ** 2, -1)
        base = np.where(s < a * a, 1 - s / a ** 2, 0.0)
        w = (-8 / a ** 2 * base ** 3) * (u[..., 1] + 0.5)
        return {(j + 1,): w * (zeta[..., j] - M.point(center)[j]).conj() for j in range(5)}
    return field


def test_local_solve_of_zero_is_zero(q22_solver):
    M, solver = q22_solver
    zero = lambda w: {(j + 1,): 0 * w[..., 0] for j in range(5)}
    out = solver.solve(zero, 1, M.point(np.full(9, 0.01)))
    assert all(v == 0 for v in out.values())


def test_local_solve_is_linear(q22_solver):
    M, solver = q22_solver
    center = np.zeros(9)
    h1, h2 = bump_form(M, center), bump_form(M, center + 0.05)
    combo = lambda w: {K: 2.5 * v + h2(w)[K] for K, v in h1(w).items()}
    z = M.point(np.full(9, 0.01))
    a, b, c = (solver.solve(h, 1, z)[()] for h in (h1, h2, combo))
    assert abs(c - (2.5 * a + b)) <= 1e-9 * (abs(c) + 1e-300)
