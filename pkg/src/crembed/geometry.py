"""
Generic CR patches in graph form.

A patch is ``M = {x_j = h_j(y_1..y_m, z_{m+1}..z_n), j = 1..m}`` in C^n with
defining functions ``rho_j = x_j - h_j``.  Graph coordinates are ordered as
``u = (y_1..y_m, x_{m+1}, y_{m+1}, ..., x_n, y_n)``.

Hermitian conventions: the complex Hessian of a real function f is
``H[i, j] = d^2 f / dz_i dzbar_j`` and the Levi quadratic form is
``L(w) = sum_ij H[i, j] w_i conj(w_j) = w^H H^T w``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import subspace_angles

from .polynomial import Poly, graph_term


class ModelError(ValueError):
    """Invalid model definition (bad file, non-generic or non-real graph data)."""


class GraphManifold:
    """
    CR patch ``x_j = h_j(y, z'')`` with polynomial graph functions.

    Parameters
    ----------
    n, m : int
        Ambient complex dimension and codimension, ``1 <= m < n - 1``.
    h : list of Poly
        Graph functions written in ambient variables; they may only depend
        on y_1..y_m and z_{m+1}..z_n (and conjugates).
    box : array (2n-m, 2), optional
        Patch ranges for the graph coordinates.
    grid : sequence of int, optional
        Grid resolution per graph axis.
    """

    def __init__(self, n: int, m: int, h: Sequence[Poly], box=None, grid=None, name: str = "",
                 allow_low_rank: bool = False):
        if not allow_low_rank and not (1 <= m < n - 1):
            raise ModelError(f"need 1 <= m < n-1, got n={n}, m={m}")
        if len(h) != m:
            raise ModelError(f"expected {m} graph functions, got {len(h)}")
        self.n, self.m, self.name = int(n), int(m), name
        for j, p in enumerate(h):
            if p.n != n:
                raise ModelError(f"graph function h_{j + 1} has n={p.n}, expected {n}")
            if not p.is_real(1e-12):
                raise ModelError(f"graph function h_{j + 1} is not real-valued")
        self.h = list(h)
        self.rho = [Poly.x(j, n) - self.h[j] for j in range(m)]
        self._d = [[r.d(i) for i in range(n)] for r in self.rho]
        self._dbar = [[r.d(i, True) for i in range(n)] for r in self.rho]
        self._hess = [[[self._d[k][i].d(j, True) for j in range(n)] for i in range(n)] for k in range(m)]
        self._holo = [[[self._d[k][i].d(j) for j in range(n)] for i in range(n)] for k in range(m)]
        dim = 2 * n - m
        self.box = np.asarray(box if box is not None else [[-0.5, 0.5]] * dim, dtype=float)
        if self.box.shape != (dim, 2):
            raise ModelError(f"box must have shape ({dim}, 2)")
        self.grid = tuple(int(g) for g in (grid if grid is not None else [5] * dim))
        if len(self.grid) != dim:
            raise ModelError(f"grid must have {dim} entries")
        self._check_x_independence()

    def _check_x_independence(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(8, self.n)) + 1j * rng.normal(size=(8, self.n))
        for j, p in enumerate(self.h):
            for k in range(self.m):
                dx = p.d(k) + p.d(k, True)
                if np.max(np.abs(dx(z)), initial=0) > 1e-10:
                    raise ModelError(f"h_{j + 1} depends on x_{k + 1}")

    @property
    def dim(self) -> int:
        return 2 * self.n - self.m

    # coordinates
    def point(self, u) -> np.ndarray:
        """Ambient point for graph coordinates ``u`` (..., 2n-m)."""
        u = np.asarray(u, dtype=float)
        n, m = self.n, self.m
        z = np.zeros(u.shape[:-1] + (n,), dtype=complex)
        z[..., :m] = 1j * u[..., :m]
        z[..., m:] = u[..., m::2] + 1j * u[..., m + 1::2]
        for j in range(m):
            z[..., j] = self.h[j](z).real + 1j * u[..., j]
        return z

    def coords(self, z) -> np.ndarray:
        """Graph coordinates of an ambient point (x_1..x_m are dropped)."""
        z = np.asarray(z, dtype=complex)
        n, m = self.n, self.m
        u = np.empty(z.shape[:-1] + (self.dim,))
        u[..., :m] = z[..., :m].imag
        u[..., m::2] = z[..., m:].real
        u[..., m + 1::2] = z[..., m:].imag
        return u

    def grid_axes(self) -> List[np.ndarray]:
        return [np.linspace(lo, hi, k) for (lo, hi), k in zip(self.box, self.grid)]

    def grid_points(self) -> np.ndarray:
        """Graph-coordinate grid, shape grid + (2n-m,)."""
        return np.stack(np.meshgrid(*self.grid_axes(), indexing="ij"), axis=-1)

    def spacing(self) -> np.ndarray:
        return np.array([(hi - lo) / (k - 1) if k > 1 else 1.0 for (lo, hi), k in zip(self.box, self.grid)])

    def contains(self, u, margin=0.0) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return np.all((u >= self.box[:, 0] + margin) & (u <= self.box[:, 1] - margin), axis=-1)

    # defining data
    def rho_values(self, z) -> np.ndarray:
        return np.stack([r(z).real for r in self.rho], axis=-1)

    def drho_dz(self, z) -> np.ndarray:
        """[..., l, i] = d rho_l / dz_i."""
        return np.stack([np.stack([d(z) for d in row], axis=-1) for row in self._d], axis=-2)

    def drho_dzbar(self, z) -> np.ndarray:
        return np.stack([np.stack([d(z) for d in row], axis=-1) for row in self._dbar], axis=-2)

    def complex_hessian(self, z) -> np.ndarray:
        """[..., k, i, j] = d^2 rho_k / dz_i dzbar_j."""
        return np.stack([np.stack([np.stack([e(z) for e in row], axis=-1) for row in hk], axis=-2)
                         for hk in self._hess], axis=-3)

    def holomorphic_hessian(self, z) -> np.ndarray:
        """[..., k, i, j] = d^2 rho_k / dz_i dz_j."""
        return np.stack([np.stack([np.stack([e(z) for e in row], axis=-1) for row in hk], axis=-2)
                         for hk in self._holo], axis=-3)

    def defect(self, z) -> np.ndarray:
        return np.max(np.abs(self.rho_values(z)), axis=-1)

    def genericity(self, z) -> np.ndarray:
        """|det| of the leading m x m minor of d rho / dz."""
        return np.abs(np.linalg.det(self.drho_dz(z)[..., :, :self.m]))

    def check_generic(self, tol: float = 1e-6) -> float:
        g = self.genericity(self.point(self.grid_points())).min()
        if g < tol:
            raise ModelError(f"model {self.name!r} is not generic on its patch (min minor {g:.2e})")
        return float(g)

    def __repr__(self):
        return f"GraphManifold({self.name!r}, n={self.n}, m={self.m})"


# ----------------------------------------------------------------------------
# frames

@dataclass
class Frame:
    """
    Frame at a point: columns of ``P`` are the transversal fields P'_l and
    columns of ``Z`` are the tangential fields Z_i = e_i - sum_l (d rho_l/dz_i) P'_l.
    """

    z: np.ndarray
    drho: np.ndarray
    drho_bar: np.ndarray
    gram: np.ndarray
    P: np.ndarray
    Z: np.ndarray

    def duality_residual(self) -> float:
        m = self.P.shape[1]
        return float(np.abs(self.drho @ self.P - np.eye(m)).max())

    def orthogonality_residual(self) -> float:
        """Hermitian products of P'_l with the tangent frame Z."""
        return float(np.abs(self.P.conj().T @ self.Z).max())

    def annihilation_residual(self) -> float:
        return float(np.abs(self.drho @ self.Z).max())

    def relation_residual(self) -> float:
        """sum_i p_l^i Z_i = 0 for each l."""
        return float(np.abs(self.Z @ self.P).max())

    @property
    def tangent(self) -> np.ndarray:
        """Basis Z_{m+1}..Z_n of T'(M) as columns."""
        return self.Z[:, self.P.shape[1]:]


def build_frame(M: GraphManifold, z, cond_max: float = 1e8) -> Frame:
    """
    Transversal and tangential frame at ``z``.

    The Gram matrix ``[d rho/dz][d rho/dzbar]^T`` must be invertible; its
    inverse normalizes the transversal fields so that d rho_l(P'_s) = delta.
    """
    z = np.asarray(z, dtype=complex)
    rz = M.drho_dz(z)
    rzb = M.drho_dzbar(z)
    gram = rz @ rzb.T
    if np.linalg.cond(gram) > cond_max:
        raise ValueError("normalization matrix is near-singular at this point")
    P = rzb.T @ np.linalg.inv(gram)
    Z = np.eye(M.n, dtype=complex) - P @ rz
    return Frame(z, rz, rzb, gram, P, Z)


# ----------------------------------------------------------------------------
# Levi form

@dataclass
class LeviData:
    theta: np.ndarray
    matrix: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    negative_count: int
    tangent: np.ndarray
    complement: Optional[np.ndarray] = None

    def negative_space(self, q: int) -> np.ndarray:
        """Ambient vectors spanning the q most-negative directions (columns)."""
        return self.tangent @ self.eigenvectors[:, :q]


def levi_form(M: GraphManifold, z, theta, tol: float = 1e-8, tol_eig: float = 1e-9,
              q: Optional[int] = None, kohn_A: float = 1.0) -> LeviData:
    """
    Levi form of ``sum_k theta_k rho_k`` on T'(M) in the Z-frame.

    Parameters
    ----------
    M : GraphManifold
    z : array (n,)
        Point on the patch.
    theta : array (m,)
        Unit direction.
    tol : float
        Allowed off-manifold defect.
    tol_eig : float
        Relative negativity threshold (times the spectral norm).
    q : int, optional
        When given, also fill the orthonormal complement frame used by the barrier.
    """
    z = np.asarray(z, dtype=complex)
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.shape != (M.m,) or abs(np.linalg.norm(theta) - 1) > 1e-12:
        raise ValueError("theta must be a unit vector of length m")
    if M.defect(z) > tol:
        raise ValueError(f"point is off the manifold (defect {M.defect(z):.2e})")
    frame = build_frame(M, z)
    H = np.tensordot(theta, M.complex_hessian(z), axes=1)
    T = frame.tangent
    L = T.conj().T @ H.T @ T
    L = 0.5 * (L + L.conj().T)
    w, v = np.linalg.eigh(L)
    cut = tol_eig * max(np.abs(w).max(initial=0.0), 0.0)
    neg = int(np.sum(w < -cut)) if cut > 0 else int(np.sum(w < 0))
    comp = complement_frame(M, z, theta, q, kohn_A) if q is not None else None
    return LeviData(theta, L, w, v, neg, T, comp)


def certify_regular_q_pseudoconcave(M: GraphManifold, q: int, thetas, zs, angle_tol_deg: float = 10.0,
                                    tol_eig: float = 1e-9) -> dict:
    """
    Sampled certificate of regular q-pseudoconcavity.

    Every (theta, z) sample must show at least q negative Levi eigenvalues;
    the span of the q most-negative eigenvectors must move by at most
    ``angle_tol_deg`` between each z-sample and its nearest neighbour.
    """
    thetas = [np.atleast_1d(np.asarray(t, dtype=float)) for t in thetas]
    zs = [np.asarray(z, dtype=complex) for z in zs]
    if not thetas or not zs:
        raise ValueError("sample sets must be nonempty")
    failures, frames, max_angle = [], {}, 0.0
    angle_failures = []
    # adjacency: each z-sample is compared with its nearest other sample
    pts = np.array([np.concatenate([z.real, z.imag]) for z in zs])
    dist = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    np.fill_diagonal(dist, np.inf)
    nearest = np.argmin(dist, axis=1) if len(zs) > 1 else np.zeros(1, int)
    for ti, th in enumerate(thetas):
        for zi, z in enumerate(zs):
            data = levi_form(M, z, th, tol_eig=tol_eig)
            if data.negative_count < q:
                failures.append({"theta": th.tolist(), "z_index": zi, "negative_count": data.negative_count})
                continue
            frames[(ti, zi)] = data.negative_space(q)
        for zi in range(len(zs)):
            zj = int(nearest[zi])
            if q == 0 or zj == zi or (ti, zi) not in frames or (ti, zj) not in frames:
                continue
            ang = float(np.degrees(np.max(subspace_angles(frames[(ti, zi)], frames[(ti, zj)]))))
            max_angle = max(max_angle, ang)
            if ang > angle_tol_deg:
                angle_failures.append({"theta": th.tolist(), "z_index": zi, "angle_deg": ang})
    return {
        "passed": not failures and not angle_failures,
        "q": q,
        "samples": len(thetas) * len(zs),
        "failures": failures,
        "angle_failures": angle_failures,
        "max_angle_deg": max_angle,
        "frames": frames,
    }


# ----------------------------------------------------------------------------
# Kohn regularization and barrier frames

def kohn_modify(rhos: Sequence[Poly], A: float) -> List[Poly]:
    """rho_k + A * sum_i rho_i^2 for each k."""
    if A < 0:
        raise ValueError("A must be nonnegative")
    sq = sum((r * r for r in rhos), Poly.const(0.0, rhos[0].n))
    return [r + sq * A for r in rhos]


def kohn_directional(rhos: Sequence[Poly], theta, A: float) -> Poly:
    """sum_k theta_k rho_k + A * sum_i rho_i^2 (positive normal boost for every direction)."""
    if A < 0:
        raise ValueError("A must be nonnegative")
    n = rhos[0].n
    out = Poly.const(0.0, n)
    for t, r in zip(np.atleast_1d(theta), rhos):
        out = out + r * float(t)
    return out + sum((r * r for r in rhos), Poly.const(0.0, n)) * A


def poly_hessian(p: Poly, z) -> np.ndarray:
    """Complex Hessian d^2 p / dz_i dzbar_j at z (vectorized over leading axes)."""
    n = p.n
    return np.stack([np.stack([p.d(i).d(j, True)(z) for j in range(n)], axis=-1) for i in range(n)], axis=-2)


def complement_frame(M: GraphManifold, z, theta, q: int, A: float = 1.0) -> np.ndarray:
    """
    Rows a_j spanning the orthogonal complement of the q+m most-positive
    directions of the Kohn-regularized form at z.

    The rows are normalized so that ``sum_j |a_j . w|^2`` is the squared norm
    of the projection of w onto the complement.
    """
    f = kohn_directional(M.rho, theta, A)
    G = poly_hessian(f, z).T
    G = 0.5 * (G + G.conj().T)
    w, v = np.linalg.eigh(G)
    keep = M.n - q - M.m
    if keep < 0:
        raise ValueError("q + m exceeds n")
    # a_j = conj(e_j) so that a_j . w = <w, e_j>
    return v[:, :keep].T.conj()


# ----------------------------------------------------------------------------
# extension and tangential Cauchy-Riemann operator

def extend(M: GraphManifold, g: Callable) -> Callable:
    """E(g): ambient function constant in x_1..x_m; ``g`` takes graph coordinates."""

    def Eg(z):
        return g(M.coords(z))

    return Eg


def extend_grid(M: GraphManifold, values: np.ndarray, x_grid: Sequence[np.ndarray]) -> np.ndarray:
    """Grid version of E: prepend x_1..x_m axes along which values are repeated."""
    values = np.asarray(values)
    shape = tuple(len(x) for x in x_grid) + values.shape
    return np.broadcast_to(values, shape).copy()


def restriction_matrix(M: GraphManifold, z) -> np.ndarray:
    """
    Coefficients C[..., l, j] with dzbar_l = sum_j C[l, j] dzbar_{m+1+j} on T''(M), l <= m.
    """
    rzb = M.drho_dzbar(z)
    m = M.m
    return -np.linalg.solve(rzb[..., :, :m], rzb[..., :, m:])


def restrict_forms(M: GraphManifold, coeffs: Dict[Tuple[int, ...], np.ndarray], z) -> Dict[Tuple[int, ...], np.ndarray]:
    """
    Restrict an ambient (0,r) form {K: coefficient} to T''(M).

    ``K`` are 1-based increasing dzbar index tuples over 1..n; the output is
    keyed by tuples over m+1..n.
    """
    n, m = M.n, M.m
    C = restriction_matrix(M, z)
    out: Dict[Tuple[int, ...], np.ndarray] = {}
    for K, a in coeffs.items():
        r = len(K)
        if r == 0:
            out[()] = out.get((), 0) + a
            continue
        rows = []
        for k in K:
            if k <= m:
                rows.append(C[..., k - 1, :])
            else:
                e = np.zeros(n - m)
                e[k - m - 1] = 1.0
                rows.append(np.broadcast_to(e, C.shape[:-2] + (n - m,)))
        V = np.stack(rows, axis=-2)
        for T in itertools.combinations(range(n - m), r):
            d = np.linalg.det(V[..., :, list(T)])
            key = tuple(t + m + 1 for t in T)
            out[key] = out.get(key, 0) + a * d
    return out


def _wedge_dzbar_front(j: int, K: Tuple[int, ...]):
    """dzbar_j ^ dzbar_K as (sign, sorted key) or (0, None)."""
    if j in K:
        return 0, None
    pos = sum(1 for k in K if k < j)
    return (-1) ** pos, tuple(sorted(K + (j,)))


def dbar_ambient_coeffs(n: int, m: int, derivs: Dict[Tuple[int, ...], np.ndarray]):
    """
    Assemble dbar of sum_K g_K dzbar_K from derivative tables.

    ``derivs[K]`` has trailing axis n holding dg_K / dzbar_j.
    """
    out: Dict[Tuple[int, ...], np.ndarray] = {}
    for K, dg in derivs.items():
        for j in range(1, n + 1):
            s, key = _wedge_dzbar_front(j, K)
            if s:
                out[key] = out.get(key, 0) + s * dg[..., j - 1]
    return out


def _wirtinger_from_graph(M: GraphManifold, du: np.ndarray) -> np.ndarray:
    """d/dzbar_j of an x_1..x_m-independent function from its graph-coordinate gradient."""
    m, n = M.m, M.n
    out = np.empty(du.shape[:-1] + (n,), dtype=complex)
    out[..., :m] = 0.5j * du[..., :m]
    out[..., m:] = 0.5 * (du[..., m::2] + 1j * du[..., m + 1::2])
    return out


def tangential_cr(M: GraphManifold, g, r: Optional[int] = None) -> Dict[Tuple[int, ...], np.ndarray]:
    """
    Tangential Cauchy-Riemann operator on grid data.

    Parameters
    ----------
    M : GraphManifold
    g : array or dict
        Function values on ``M.grid_points()`` or a (0,r) coefficient table
        {K: grid array} with K over m+1..n.

    Returns
    -------
    dict
        (0,r+1) coefficients on the grid, keyed by index tuples over m+1..n.
        Central second-order differences inside, one-sided second order at
        the patch edges.
    """
    if not isinstance(g, dict):
        g = {(): np.asarray(g)}
    if any(min(g[K].shape) < 3 for K in g):
        raise ValueError("need at least 3 grid points per axis")
    h = M.spacing()
    derivs = {}
    for K, vals in g.items():
        if any(k <= M.m for k in K):
            raise ValueError("tangential forms are indexed by m+1..n")
        du = np.stack(np.gradient(vals, *h, edge_order=2), axis=-1)
        derivs[K] = _wirtinger_from_graph(M, du)
    amb = dbar_ambient_coeffs(M.n, M.m, derivs)
    return restrict_forms(M, amb, M.point(M.grid_points()))


def tangential_cr_at(M: GraphManifold, g: Callable, u, h: float = 1e-4, check_box: bool = True):
    """
    Pointwise tangential Cauchy-Riemann operator by central differences.

    ``g(u)`` returns either an array (function) or a dict {K: array} of
    (0,r) coefficients at graph coordinates ``u`` (..., 2n-m).
    """
    u = np.asarray(u, dtype=float)
    if check_box and not np.all(M.contains(u, margin=h)):
        raise ValueError("finite-difference stencil leaves the patch")
    base = g(u)
    scalar = not isinstance(base, dict)
    keys = [()] if scalar else list(base)
    grads = {K: [] for K in keys}
    for a in range(M.dim):
        e = np.zeros(M.dim)
        e[a] = h
        gp, gm = g(u + e), g(u - e)
        if scalar:
            gp, gm = {(): gp}, {(): gm}
        for K in keys:
            grads[K].append((gp[K] - gm[K]) / (2 * h))
    derivs = {K: _wirtinger_from_graph(M, np.stack(v, axis=-1)) for K, v in grads.items()}
    amb = dbar_ambient_coeffs(M.n, M.m, derivs)
    return restrict_forms(M, amb, M.point(u))


# ----------------------------------------------------------------------------
# shipped models and model files

def quadric(signs: Sequence[int], scale: float = 0.5, name: str = "", box_half: float = 0.5,
            grid=None) -> GraphManifold:
    """Hypersurface x_1 = scale * sum_j s_j |z_{j+1}|^2 in C^(1+len(signs))."""
    n = 1 + len(signs)
    h = Poly.const(0.0, n)
    for j, s in enumerate(signs):
        h = h + Poly.z(j + 1, n) * Poly.zbar(j + 1, n) * (scale * s)
    dim = 2 * n - 1
    return GraphManifold(n, 1, [h], box=[[-box_half, box_half]] * dim, grid=grid, name=name)


def builtin_models() -> Dict[str, Callable[[], GraphManifold]]:
    return {
        "quadric11": lambda: quadric([-1, 1], name="quadric11"),
        "quadric22": lambda: quadric([-1, -1, 1, 1], name="quadric22", grid=[3] * 9),
        "quadric33": lambda: quadric([-1, -1, -1, 1, 1, 1], name="quadric33", grid=[3] * 13),
        "sphere3": lambda: quadric([1, 1], name="sphere3"),
        "flat3": lambda: quadric([0, 0], name="flat3"),
    }


def _coeff(c):
    if isinstance(c, (list, tuple)):
        return complex(c[0], c[1])
    return complex(c)


def manifold_from_dict(d: dict, name: str = "") -> GraphManifold:
    try:
        n, m = int(d["n"]), int(d["m"])
        hs = []
        for j, spec in enumerate(d["h"]):
            p = Poly.const(0.0, n)
            for term in spec["terms"]:
                p = p + graph_term(_coeff(term.get("coeff", 1.0)), term.get("y", [0] * m),
                                   term.get("z", [0] * (n - m)), term.get("zbar", [0] * (n - m)), n, m)
            hs.append(p)
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed model definition: {exc}") from exc
    M = GraphManifold(n, m, hs, box=d.get("box"), grid=d.get("grid"), name=d.get("name", name))
    M.check_generic()
    return M


def load_model(path) -> GraphManifold:
    """Read a model file (YAML or JSON) and validate genericity."""
    import yaml

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ModelError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ModelError(f"{path}: top level must be a mapping")
    return manifold_from_dict(data, name=path.stem)
