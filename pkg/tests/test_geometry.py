import numpy as np
import pytest
import scipy.linalg
import sympy as sp
from hypothesis import given, settings, strategies as st

from crembed.geometry import (
    GraphManifold, ModelError, build_frame, certify_regular_q_pseudoconcave, complement_frame, extend,
    extend_grid, kohn_directional, kohn_modify, levi_form, load_model, poly_hessian, quadric,
    tangential_cr, tangential_cr_at,
)
from crembed.polynomial import Poly, graph_term


def fd_hessian(f, z, h=1e-4):
    """Complex Hessian d^2 f / dz_i dzbar_j from real second differences of f evaluated as a black box."""
    n = len(z)

    def real_f(v):
        return f(v[:n] + 1j * v[n:]).real

    v0 = np.concatenate([z.real, z.imag])
    D = np.zeros((2 * n, 2 * n))
    for a in range(2 * n):
        for b in range(2 * n):
            ea, eb = np.eye(2 * n)[a] * h, np.eye(2 * n)[b] * h
            D[a, b] = (real_f(v0 + ea + eb) - real_f(v0 + ea - eb) - real_f(v0 - ea + eb)
                       + real_f(v0 - ea - eb)) / (4 * h * h)
    xx, xy, yx, yy = D[:n, :n], D[:n, n:], D[n:, :n], D[n:, n:]
    # d/dz = (dx - i dy)/2, d/dzbar = (dx + i dy)/2
    return 0.25 * (xx + yy + 1j * (xy - yx))


def random_graph(n, m, seed, amp=0.3):
    rng = np.random.default_rng(seed)
    hs = []
    for j in range(m):
        p = Poly.const(0.0, n)
        for _ in range(4):
            ye = rng.integers(0, 2, size=m)
            ze = rng.integers(0, 2, size=n - m)
            ce = rng.integers(0, 2, size=n - m)
            c = amp * (rng.normal() + 1j * rng.normal())
            t = graph_term(c, ye, ze, ce, n, m)
            p = p + t + t.conj()
        hs.append(p)
    return GraphManifold(n, m, hs, name="random")


def test_point_coords_roundtrip():
    M = random_graph(4, 2, 1)
    u = np.random.default_rng(0).uniform(-0.4, 0.4, size=(30, M.dim))
    z = M.point(u)
    assert np.allclose(M.coords(z), u)
    assert M.defect(z).max() < 1e-13


def test_model_validation():
    with pytest.raises(ModelError):
        GraphManifold(2, 1, [Poly.const(0, 2)])
    with pytest.raises(ModelError):
        GraphManifold(3, 1, [Poly.z(1, 3)])  # not real
    with pytest.raises(ModelError):
        GraphManifold(3, 1, [Poly.x(0, 3)])  # depends on x_1


def test_levi_examples():
    M = quadric([1, -1], scale=1.0)
    d = levi_form(M, np.zeros(3), [1.0])
    assert d.negative_count == 1
    assert d.eigenvalues[0] < 0 < d.eigenvalues[1]
    assert np.isclose(-d.eigenvalues[0], d.eigenvalues[1])
    flat = quadric([0, 0])
    for th in (1.0, -1.0):
        d = levi_form(flat, np.zeros(3), [th])
        assert np.allclose(d.matrix, 0) and d.negative_count == 0


def test_levi_off_manifold_rejected():
    M = quadric([1, -1])
    with pytest.raises(ValueError):
        levi_form(M, np.array([0.3, 0, 0]), [1.0])


def test_levi_quadric33_against_dense_oracle():
    M = quadric([-1, -1, -1, 1, 1, 1])
    for th in (1.0, -1.0):
        d = levi_form(M, np.zeros(7), [th])
        H = th * np.diag([0, 0.5, 0.5, 0.5, -0.5, -0.5, -0.5])  # complex Hessian of th * rho
        oracle = scipy.linalg.eigvalsh(H[1:, 1:])
        assert np.allclose(np.sort(d.eigenvalues), np.sort(oracle))
        assert d.negative_count == 3
        assert np.allclose(d.matrix, d.matrix.conj().T, atol=1e-12)


def test_certify_quadric33():
    M = quadric([-1, -1, -1, 1, 1, 1])
    us = np.zeros((27, M.dim))
    us[:, [0, 1, 8]] = np.stack(np.meshgrid(*[np.linspace(-0.1, 0.1, 3)] * 3, indexing="ij"), -1).reshape(-1, 3)
    zs = M.point(us)
    thetas = [[1.0], [-1.0]] * 32
    rep = certify_regular_q_pseudoconcave(M, 3, thetas, zs)
    assert rep["passed"], rep["failures"][:3]
    assert rep["max_angle_deg"] <= 10.0


def test_certify_failures():
    sphere = quadric([1, 1])
    rep = certify_regular_q_pseudoconcave(sphere, 1, [[1.0], [-1.0]], [np.zeros(3)])
    assert not rep["passed"]
    # with the complex-Hessian sign convention the direction without negative eigenvalues is theta = -1
    assert [f["theta"] for f in rep["failures"]] == [[-1.0]]
    flat = quadric([0, 0])
    rep = certify_regular_q_pseudoconcave(flat, 1, [[1.0], [-1.0]], [np.zeros(3), np.array([0, 0.1, 0.1j])])
    assert not rep["passed"] and len(rep["failures"]) == 4


def test_kohn_identity_and_on_manifold():
    M = random_graph(4, 2, 3)
    assert all((a - b).terms == {} for a, b in zip(kohn_modify(M.rho, 0.0), M.rho))
    mod = kohn_modify(M.rho, 7.0)
    z = M.point(np.random.default_rng(1).uniform(-0.3, 0.3, size=(5, M.dim)))
    for r, rt in zip(M.rho, mod):
        assert np.abs(rt(z)).max() < 1e-12
        for i in range(M.n):
            assert np.allclose(rt.d(i)(z), r.d(i)(z), atol=1e-12)
            assert np.allclose(rt.d(i, True)(z), r.d(i, True)(z), atol=1e-12)


def test_kohn_hessian_codim2_oracle():
    n = 3
    r1 = Poly.x(0, n) - Poly.z(2, n) * Poly.zbar(2, n)
    r2 = Poly.x(1, n) + Poly.z(2, n) * Poly.zbar(2, n)
    A = 10.0
    z0 = np.zeros(n, complex)
    for th in ([1.0, 0.0], [0.6, 0.8], [-0.8, 0.6]):
        mod = kohn_modify([r1, r2], A)
        f = mod[0] * th[0] + mod[1] * th[1]
        ours = scipy.linalg.eigvalsh(poly_hessian(f, z0))
        H = th[0] * fd_hessian(r1, z0) + th[1] * fd_hessian(r2, z0)
        L = [np.array([0.5, 0, 0]), np.array([0, 0.5, 0])]
        # d dbar(rho^2) = 2 d rho ^ dbar rho on M, scaled by the sum of theta components
        oracle = scipy.linalg.eigvalsh(H + 2 * A * sum(th) * sum(np.outer(l, l.conj()) for l in L))
        assert np.allclose(ours, oracle, atol=1e-6)
        fdir = kohn_directional([r1, r2], th, A)
        oracle_dir = scipy.linalg.eigvalsh(H + 2 * A * sum(np.outer(l, l.conj()) for l in L))
        assert np.allclose(scipy.linalg.eigvalsh(poly_hessian(fdir, z0)), oracle_dir, atol=1e-6)
        assert np.allclose(fd_hessian(fdir, z0), poly_hessian(fdir, z0), atol=1e-6)


def _frame_oracle(M, z):
    rz = M.drho_dz(z)
    # minimum-norm solutions of d rho (v) = e_s
    return np.column_stack([scipy.linalg.lstsq(rz, np.eye(M.m)[:, s])[0] for s in range(M.m)])


def test_frame_examples():
    flat = GraphManifold(2, 1, [Poly.const(0.0, 2)], allow_low_rank=True)
    fr = build_frame(flat, np.zeros(2))
    assert np.allclose(fr.drho, [[0.5, 0]])
    assert np.allclose(fr.P[:, 0], [2, 0])
    M = quadric([1, -1])
    fr = build_frame(M, np.zeros(3))
    assert fr.duality_residual() <= 1e-12 and fr.orthogonality_residual() <= 1e-12
    assert np.allclose(fr.P, _frame_oracle(M, np.zeros(3)), atol=1e-12)


@pytest.mark.parametrize("n,m,seed", [(4, 2, 0), (5, 2, 1), (4, 1, 2), (6, 3, 3)])
def test_frame_random_patch(n, m, seed):
    M = random_graph(n, m, seed)
    us = np.random.default_rng(seed).uniform(-0.4, 0.4, size=(20, M.dim))
    for z in M.point(us):
        fr = build_frame(M, z)
        assert fr.duality_residual() <= 1e-8
        assert fr.orthogonality_residual() <= 1e-8
        assert fr.annihilation_residual() <= 1e-10
        assert fr.relation_residual() <= 1e-10
        assert np.allclose(fr.P, _frame_oracle(M, z), atol=1e-10)


def test_genericity_of_shipped_models():
    for name, make in __import__("crembed.geometry", fromlist=["builtin_models"]).builtin_models().items():
        M = make()
        assert M.check_generic() > 0.1


def test_levi_eigen_continuity():
    M = random_graph(4, 1, 7, amp=0.2)
    us = np.linspace(-0.3, 0.3, 41)[:, None] * np.ones(M.dim)[None]
    lips = []
    for stride in (4, 2, 1):
        ev = np.array([levi_form(M, M.point(u), [1.0]).eigenvalues for u in us[::stride]])
        step = np.linalg.norm(us[stride] - us[0])
        lips.append(np.abs(np.diff(ev, axis=0)).max() / step)
    assert lips[0] <= lips[1] * 1.5 + 1e-12 and lips[1] <= lips[2] * 1.5 + 1e-12
    assert max(lips) < 50


def test_complement_frame_orthonormal():
    M = quadric([-1, 1])
    for th in (1.0, -1.0):
        a = complement_frame(M, np.zeros(3), [th], q=1, A=1.0)
        assert a.shape == (1, 3)
        assert np.allclose(a @ a.conj().T, np.eye(1), atol=1e-10)
        # the complement is the Levi-negative tangential direction of the regularized form
        G = poly_hessian(kohn_directional(M.rho, [th], 1.0), np.zeros(3)).T
        w = a[0].conj()
        assert (w.conj() @ G @ w).real < 0


def test_extend():
    M = quadric([1, -1])
    one = extend(M, lambda u: np.ones(u.shape[:-1]))
    rng = np.random.default_rng(2)
    z = rng.normal(size=(10, 3)) + 1j * rng.normal(size=(10, 3))
    assert np.all(one(z) == 1)
    ey = extend(M, lambda u: u[..., 0])
    assert np.allclose(ey(z), z[:, 0].imag)
    # constancy in x_1
    g = extend(M, lambda u: np.sin(u[..., 0]) * u[..., 1] ** 2 + u[..., 4])
    e1 = np.array([1e-3, 0, 0])
    assert np.allclose(g(z + e1), g(z - e1), atol=0)
    # extend then restrict is the identity
    us = rng.uniform(-0.4, 0.4, size=(10, M.dim))
    assert np.array_equal(g(M.point(us)), np.sin(us[:, 0]) * us[:, 1] ** 2 + us[:, 4])
    vals = rng.normal(size=(3, 4))
    ext = extend_grid(M, vals, [np.linspace(-1, 1, 5)])
    assert ext.shape == (5, 3, 4) and np.all(ext == vals)


def test_tangential_cr_holomorphic_and_flat():
    M = quadric([1, -1], grid=[7] * 5)
    pts = M.point(M.grid_points())
    out = tangential_cr(M, pts[..., 1])
    assert max(np.abs(v).max() for v in out.values()) < 1e-10
    flat = GraphManifold(2, 1, [Poly.const(0.0, 2)], box=[[-0.5, 0.5]] * 3, grid=[5] * 3, allow_low_rank=True)
    pts = flat.point(flat.grid_points())
    out = tangential_cr(flat, np.conj(pts[..., 1]))
    assert set(out) == {(2,)} and np.allclose(out[(2,)], 1.0)


def _symbolic_dbar_m(n, m, hs_expr, g_expr, xs, ys):
    """Symbolic dbar_M of a function of graph coordinates on a hypersurface."""
    zbar_d = []
    for j in range(n):
        zbar_d.append(lambda f, j=j: (sp.diff(f, xs[j]) + sp.I * sp.diff(f, ys[j])) / 2)
    rho = xs[0] - hs_expr
    drho_bar = [zbar_d[j](rho) for j in range(n)]
    # dzbar_1 restricted = -sum_j (drho/dzbar_j)/(drho/dzbar_1) dzbar_j
    coeffs = {}
    dg = [zbar_d[j](g_expr) for j in range(n)]
    for j in range(1, n):
        coeffs[j + 1] = sp.simplify(dg[j] - dg[0] * drho_bar[j] / drho_bar[0])
    return coeffs


def test_tangential_cr_symbolic_oracle():
    n, m = 3, 1
    M = quadric([1, -1], grid=[3] * 5)
    xs = sp.symbols("x1:4", real=True)
    ys = sp.symbols("y1:4", real=True)
    h = sp.Rational(1, 2) * (xs[1] ** 2 + ys[1] ** 2 - xs[2] ** 2 - ys[2] ** 2)
    g = ys[0] * (xs[1] ** 2 + ys[1] ** 2) + sp.sin(xs[2]) * ys[0] ** 2
    oracle = _symbolic_dbar_m(n, m, h, g, xs, ys)
    fns = {k: sp.lambdify((ys[0], xs[1], ys[1], xs[2], ys[2]), v, "numpy") for k, v in oracle.items()}

    def g_num(u):
        return u[..., 0] * (u[..., 1] ** 2 + u[..., 2] ** 2) + np.sin(u[..., 3]) * u[..., 0] ** 2

    us = np.random.default_rng(4).uniform(-0.4, 0.4, size=(50, M.dim))
    errs = []
    for hstep in (1e-2, 5e-3):
        got = tangential_cr_at(M, g_num, us, h=hstep)
        errs.append(max(np.abs(got[(k,)] - fns[k](*us.T)).max() for k in (2, 3)))
    assert errs[0] < 1e-3 and 3.0 < errs[0] / errs[1] < 5.0


def test_tangential_cr_stencil_out_of_patch():
    M = quadric([1, -1])
    with pytest.raises(ValueError):
        tangential_cr_at(M, lambda u: u[..., 0], np.full((1, 5), 0.5), h=1e-3)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_dbar_m_squares_to_zero(seed):
    # dbar_M dbar_M g = 0 on a hypersurface with two tangential directions
    M = quadric([1, -1])
    rng = np.random.default_rng(seed)
    c = rng.normal(size=5)

    def g(u):
        return np.exp(0.5 * u @ c) * (1 + u[..., 1] * u[..., 4])

    def dg(u):
        return tangential_cr_at(M, g, u, h=1e-3, check_box=False)

    u = rng.uniform(-0.2, 0.2, size=(3, M.dim))
    ddg = tangential_cr_at(M, dg, u, h=1e-3, check_box=False)
    assert max(np.abs(v).max() for v in ddg.values()) < 1e-4


def test_load_model_file(tmp_path):
    p = tmp_path / "q.yaml"
    p.write_text("n: 3\nm: 1\nh:\n  - terms:\n      - {coeff: 0.5, z: [1, 0], zbar: [1, 0]}\n"
                 "      - {coeff: -0.5, z: [0, 1], zbar: [0, 1]}\n")
    M = load_model(p)
    assert levi_form(M, np.zeros(3), [1.0]).negative_count == 1
    with pytest.raises(FileNotFoundError):
        load_model(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("n: 3\nm: 1\nh: [{terms: [{coeff: [0, 1], z: [1, 0], zbar: [0, 0]}]}]\n")
    with pytest.raises(ModelError):
        load_model(bad)
