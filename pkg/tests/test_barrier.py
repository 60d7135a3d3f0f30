import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_omega_prime_r
from crembed.barrier import (
    BarrierError, ConvexBarrier, build_barrier, check_strong_barrier, find_adjusted_pair,
    manifold_sphere_points, sobol,
)
from crembed.forms import omega_prime_r, omega_prime_r_batch
from crembed.geometry import builtin_models, quadric


@pytest.fixture(scope="module")
def q11():
    M = builtin_models()["quadric11"]()
    return M, build_barrier(M, 1, A=1.0)


def near_pairs(M, k, radius, spread, seed=0):
    rng = np.random.default_rng(seed)
    zs = M.point(rng.uniform(-radius, radius, size=(k, M.dim)))
    zetas = zs + spread * (rng.normal(size=(k, M.n)) + 1j * rng.normal(size=(k, M.n)))
    return zetas, zs


def test_phi_is_pairing_of_P(q11):
    M, b = q11
    zetas, zs = near_pairs(M, 1000, 0.1, 0.05, seed=1)
    brute = np.einsum("ki,ki->k", b.P(zetas, zs), zetas - zs)
    assert np.max(np.abs(brute - b.Phi(zetas, zs))) <= 1e-12


def test_phi_decomposition(q11):
    M, b = q11
    zetas, zs = near_pairs(M, 1000, 0.1, 0.05, seed=2)
    assert np.max(np.abs(b.Phi(zetas, zs) - b.Phi_decomposed(zetas, zs))) <= 1e-12


def test_theta_unit_off_manifold(q11):
    M, b = q11
    zetas, _ = near_pairs(M, 200, 0.1, 0.05, seed=3)
    assert np.allclose(np.linalg.norm(b.theta(zetas), axis=-1), 1.0, atol=1e-14)
    with pytest.raises(ValueError):
        b.theta(np.zeros(3))


def test_diagonal_vanishes(q11):
    M, b = q11
    z = M.point(np.random.default_rng(4).uniform(-0.1, 0.1, size=(50, M.dim)))
    for th in ([1.0], [-1.0]):
        assert np.max(np.abs(b.F(z, z, th))) == 0
        assert np.max(np.abs(b.Phi(z, z, th))) == 0


def test_positivity_eigensolver_oracle(q11):
    M, b = q11
    assert b.lambda_min >= 0.5 - 1e-12
    # oracle: assemble L + Acal by brute quadratic-form polarization at the origin
    for th in ([1.0], [-1.0]):
        a = b.frame(th, np.zeros(3))
        G = b.levi_matrix(th, np.zeros(3))
        form = lambda w: (np.conj(w) @ G @ w).real + np.sum(np.abs(a @ w) ** 2)
        H = np.zeros((3, 3), complex)
        E = np.eye(3)
        for i in range(3):
            for j in range(3):
                H[i, j] = 0.25 * (form(E[i] + E[j]) - form(E[i] - E[j])
                                  + 1j * form(E[i] + 1j * E[j]) - 1j * form(E[i] - 1j * E[j]))
        assert np.linalg.eigvalsh(H)[0] == pytest.approx(float(b.positivity(np.array(th), np.zeros(3))), abs=1e-12)


def test_strictly_pseudoconvex_q0():
    # x_1 + 1/2 |z''|^2 = 0: the full tangential complement is kept
    M = quadric([-1, -1])
    b = build_barrier(M, 0)
    zetas = np.random.default_rng(5).normal(size=(2000, 3)) * 0.05 + 0j
    zetas = zetas + 1j * np.random.default_rng(6).normal(size=(2000, 3)) * 0.05
    zetas = zetas[np.linalg.norm(M.rho_values(zetas), axis=-1) > 0]
    ratio = b.Phi(zetas, np.zeros_like(zetas)).real / np.linalg.norm(zetas, axis=-1) ** 2
    assert ratio.min() > 0.1


def test_strong_barrier_sobol(q11):
    M, b = q11
    u = (sobol(10_000, M.dim, seed=11) * 2 - 1) * 0.1
    zs = M.point(u)
    v = (sobol(10_000, 2 * M.n, seed=12) * 2 - 1) * 0.05
    zetas = zs + v[:, :3] + 1j * v[:, 3:]
    rep = check_strong_barrier(b, zetas, zs)
    assert rep["samples"] == 10_000
    assert rep["passed"] and rep["C_est"] >= 0.1
    assert rep["taylor_K"] < 50


def test_taylor_residual_is_cubic(q11):
    M, b = q11
    rng = np.random.default_rng(8)
    zs = M.point(rng.uniform(-0.05, 0.05, size=(20, M.dim)))
    v = rng.normal(size=(20, 3)) + 1j * rng.normal(size=(20, 3))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    steps = 0.04 / 2.0 ** np.arange(5)
    res = []
    for s in steps:
        zetas = zs + s * v
        res.append(np.abs(b.Phi(zetas, zs).real - b.taylor_model(zetas, zs)))
    slopes = np.polyfit(np.log(steps), np.log(np.array(res)), 1)[0]
    assert np.all((slopes > 2.7) & (slopes < 3.3))


def test_strong_barrier_rejects_diagonal(q11):
    M, b = q11
    z = M.point(np.zeros(M.dim))
    with pytest.raises(ValueError):
        check_strong_barrier(b, z[None], z[None])


def test_adjusted_pair_quadric(q11):
    M, b = q11
    ap = find_adjusted_pair(b, np.zeros(3), 0.2)
    assert ap.r >= 0.2 / 16 and ap.c > 0
    # stored contract: the certified inf holds on the sample set it was built from
    assert ap.samples > 0


def test_adjusted_pair_scaling(q11):
    M, b = q11
    big = find_adjusted_pair(b, np.zeros(3), 0.2)
    small = find_adjusted_pair(b, np.zeros(3), 0.1)
    assert small.c / 0.1 ** 2 >= 0.25 * big.c / 0.2 ** 2


def test_flat_model_fails():
    M = builtin_models()["flat3"]()
    with pytest.raises(BarrierError):
        build_barrier(M, 1)


def test_manifold_sphere_points(q11):
    M, b = q11
    pts = manifold_sphere_points(M, np.zeros(3), 0.2, 32)
    assert np.max(M.defect(pts)) < 1e-12
    assert np.allclose(np.linalg.norm(pts, axis=-1), 0.2, atol=1e-12)


def test_convex_barrier_positive_and_holomorphic():
    c = np.array([0.1 + 0.2j, -0.3j])
    cb = ConvexBarrier(c, 0.5)
    rng = np.random.default_rng(7)
    d = rng.normal(size=(500, 4))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    zetas = c + 0.5 * (d[:, :2] + 1j * d[:, 2:])
    assert np.max(np.abs(cb.tau(zetas))) < 1e-14
    inner = c + 0.45 * rng.uniform(size=(500, 1)) * (d[:, :2] + 1j * d[::-1, 2:]) / np.sqrt(2)
    assert np.all(cb.Phi(zetas, inner).real > 0)
    # dbar_z Phi by central differences in x and y of z
    h = 1e-4
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        dx = (cb.Phi(zetas, inner + e) - cb.Phi(zetas, inner - e)) / (2 * h)
        dy = (cb.Phi(zetas, inner + 1j * e) - cb.Phi(zetas, inner - 1j * e)) / (2 * h)
        assert np.max(np.abs(0.5 * (dx + 1j * dy))) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 0.2), st.integers(0, 2 ** 16))
def test_phi_pairing_property(spread, seed):
    M = quadric([-1, 1])
    b = build_barrier(M, 1)
    zetas, zs = near_pairs(M, 20, 0.1, spread, seed)
    P = b.P(zetas, zs)
    assert np.allclose(np.sum(P * (zetas - zs), -1), b.Phi_decomposed(zetas, zs), atol=1e-12, rtol=0)


@pytest.fixture(scope="module")
def q33():
    M = builtin_models()["quadric33"]()
    return M, build_barrier(M, 3)


def test_concave_kernel_vanishing_below_q(q33):
    M, b = q33
    eta = b.kernel()
    zetas, zs = near_pairs(M, 100, 0.1, 0.15, seed=0)
    for r in range(3):
        _, coeffs = omega_prime_r_batch(eta, r, zetas, zs)
        assert np.abs(coeffs).max() <= 1e-10
    _, coeffs = omega_prime_r_batch(eta, 3, zetas, zs)
    assert np.abs(coeffs).max() > 1e-3


def test_concave_kernel_vanishing_brute_oracle():
    # permutation-sum oracle is affordable in C^5; the (2,2) model has q = 2
    M = builtin_models()["quadric22"]()
    eta = build_barrier(M, 2).kernel()
    zetas, zs = near_pairs(M, 3, 0.1, 0.15, seed=9)
    for k in range(3):
        for r in (0, 1):
            fast = omega_prime_r(eta, r, (zetas[k], zs[k]))
            brute = brute_omega_prime_r(eta, r, (zetas[k], zs[k]))
            assert max((abs(c) for c in brute.terms.values()), default=0) <= 1e-10
            assert fast.allclose(brute, atol=1e-10)
        assert brute_omega_prime_r(eta, 2, (zetas[k], zs[k])).norm() > 1e-3
