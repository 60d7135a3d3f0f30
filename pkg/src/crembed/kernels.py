"""
Cauchy-Fantappie integral operators on balls and on tubes around a hypersurface patch.

Forms are integrated by pulling them back through a real chart of C^n:

* ``FlatChart``: real coordinates (x_1, y_1, ..., x_n, y_n);
* ``TubeChart``: ``(s, u)`` with ``zeta = M.point(u) + s e_1`` so that
  ``rho_1(zeta) = s`` exactly.  This chart is positively oriented.

A top-degree form ``dzeta_1..n ^ dzetabar_J ^ dt_L`` pulls back to the
determinant of the corresponding Jacobian rows.  Boundary strata are level
sets inside the chart; integrating a form over them uses

    int_{G = 0} alpha = int delta(G) det[grad G; rows] dx,

with the outward normal along grad G, evaluated in polar coordinates around
the evaluation point.  Corners prepend two covector rows.  Products with
simplices are oriented with the simplex frame first, which is the
convention under which

    b(U x Delta) = U x b(Delta) + (-1)^dim(Delta) bU x Delta.

Output forms in z are returned as ``{K: value}`` with ``K`` a 1-based
increasing tuple of dzbar indices; the dzbar factors are moved in front of
the integral.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import factorial, pi
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from .barrier import Barrier, ConvexBarrier
from .forms import FormMonomial, JetField, bochner_martinelli, interpolate_kernels, monomial_wedge, omega_prime_r_batch
from .geometry import GraphManifold
from .quadrature import graded, simplex_rule, sphere_rule

FormValue = Dict[Tuple[int, ...], complex]
FormField = Callable[[np.ndarray], Dict[Tuple[int, ...], np.ndarray]]


class QuadratureError(RuntimeError):
    """Node generation failed (non-star-shaped slice, budget exceeded, singular node)."""


def cf_prefactor(n: int, r: int) -> complex:
    """
    (-1)^r (-1)^(n(n-1)/2) (n-1)! / (2 pi i)^n.

    The middle sign makes the boundary Bochner-Martinelli integral of a
    holomorphic function, written as g ^ omega'(eta) ^ omega(zeta) over the
    outward-oriented sphere, reproduce +g.
    """
    return (-1) ** (r + n * (n - 1) // 2) * factorial(n - 1) / (2j * pi) ** n


# ----------------------------------------------------------------------------
# charts

class FlatChart:
    """Identity chart with real coordinates (x_1, y_1, ..., x_n, y_n)."""

    def __init__(self, n: int):
        self.n = n
        self.dim = 2 * n
        J = np.zeros((n, 2 * n), complex)
        J[np.arange(n), 2 * np.arange(n)] = 1
        J[np.arange(n), 2 * np.arange(n) + 1] = 1j
        self._J = J

    def zeta(self, x):
        x = np.asarray(x, float)
        return x[..., 0::2] + 1j * x[..., 1::2]

    def jac(self, x):
        return np.broadcast_to(self._J, np.shape(x)[:-1] + self._J.shape)

    def to_x(self, zeta):
        zeta = np.asarray(zeta, complex)
        out = np.empty(zeta.shape[:-1] + (2 * self.n,))
        out[..., 0::2], out[..., 1::2] = zeta.real, zeta.imag
        return out


class TubeChart:
    """
    Chart (s, u) of a neighbourhood of a hypersurface patch, s = rho_1.

    Parameters
    ----------
    M : GraphManifold
        Patch with m = 1.
    """

    def __init__(self, M: GraphManifold):
        if M.m != 1:
            raise ValueError("tube charts are implemented for hypersurfaces (m = 1)")
        self.M = M
        self.n = M.n
        self.dim = 2 * M.n
        self._dh = [M.h[0].d(i) for i in range(M.n)]

    def zeta(self, x):
        x = np.asarray(x, float)
        z = self.M.point(x[..., 1:])
        z[..., 0] += x[..., 0]
        return z

    def jac(self, x):
        x = np.asarray(x, float)
        n = self.n
        z = self.M.point(x[..., 1:])
        dh = np.stack([d(z) for d in self._dh], axis=-1)
        J = np.zeros(x.shape[:-1] + (n, 2 * n), complex)
        J[..., 0, 0] = 1.0
        # h is real: dh/dx_j = 2 Re dh/dz_j, dh/dy_j = -2 Im dh/dz_j
        J[..., 0, 1] = -2 * dh[..., 0].imag + 1j
        for j in range(1, n):
            J[..., 0, 2 * j] = 2 * dh[..., j].real
            J[..., 0, 2 * j + 1] = -2 * dh[..., j].imag
            J[..., j, 2 * j] = 1.0
            J[..., j, 2 * j + 1] = 1j
        return J

    def to_x(self, zeta):
        zeta = np.asarray(zeta, complex)
        s = self.M.rho_values(zeta)[..., 0]
        return np.concatenate([s[..., None], self.M.coords(zeta)], axis=-1)


def ball_level(chart, center, radius):
    """G(x) = |zeta(x) - c|^2 - R^2 and its chart gradient."""
    center = np.asarray(center, complex)

    def G(x):
        return np.sum(np.abs(chart.zeta(x) - center) ** 2, axis=-1) - radius ** 2

    def grad(x):
        w = np.conj(chart.zeta(x) - center)
        return 2 * np.einsum("...i,...ia->...a", w, chart.jac(x)).real

    return G, grad


def radial_root(G, x0, dirs, r_hi: float, iters: int = 64) -> np.ndarray:
    """Smallest-bracket bisection for G(x0 + r dir) = 0 with G(x0) < 0."""
    x0 = np.broadcast_to(x0, dirs.shape)
    if np.any(G(x0) >= 0):
        raise QuadratureError("polar center lies outside the domain")
    lo = np.zeros(len(dirs))
    hi = np.full(len(dirs), float(r_hi))
    for _ in range(60):
        out = G(x0 + hi[:, None] * dirs) < 0
        if not out.any():
            break
        hi[out] *= 2
    else:
        raise QuadratureError("radial bracket failed")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        inside = G(x0 + mid[:, None] * dirs) < 0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return 0.5 * (lo + hi)


# ----------------------------------------------------------------------------
# node sets

@dataclass
class Nodes:
    """
    Quadrature nodes on a chart stratum.

    ``normals`` are covector rows (c, dim) prepended to the pullback
    determinant; ``weight`` already contains the chart measure and the
    level-set density.
    """

    x: np.ndarray
    weight: np.ndarray
    normals: np.ndarray

    def __len__(self):
        return len(self.weight)

    @staticmethod
    def concat(parts: Sequence["Nodes"]) -> "Nodes":
        return Nodes(np.concatenate([p.x for p in parts]), np.concatenate([p.weight for p in parts]),
                     np.concatenate([p.normals for p in parts]))


@dataclass
class CFConfig:
    """
    Quadrature budget for the integral operators.

    Attributes
    ----------
    sphere : int
        Product-rule order for direction spheres of dimension <= 3, node
        count for quasi-Monte-Carlo directions otherwise.
    p_radial, p_normal, p_simplex : int
        Gauss points per radial panel, per normal-coordinate panel and per
        simplex factor.
    grade : float
        First radial panel width relative to the near-singular scale.
    s_floor : float
        Smallest normal-coordinate panel, relative to epsilon.
    chunk : int
        Nodes evaluated per batch.
    seed : int
        Seed for quasi-Monte-Carlo directions.
    eps_ladder : tuple
        Strictly decreasing tube widths for epsilon extrapolation.
    """

    sphere: int = 8
    p_radial: int = 6
    p_normal: int = 6
    p_simplex: int = 4
    grade: float = 0.5
    s_floor: float = 1e-4
    chunk: int = 20000
    seed: int = 0
    eps_ladder: Tuple[float, ...] = (0.04, 0.02, 0.01, 0.005)

    def __post_init__(self):
        lad = np.asarray(self.eps_ladder, float)
        if np.any(lad <= 0) or np.any(np.diff(lad) >= 0):
            raise ValueError("eps ladder must be positive and strictly decreasing")


def _polar_slice(G, x0, rule, scale, p, r_guess, d):
    """Volume nodes of the d-dimensional star-shaped slice {G < 0} around x0 spanned by the rule's directions."""
    dirs, wd = rule
    R = radial_root(G, x0, dirs, r_guess)
    xi, wxi = graded(0.0, 1.0, min(1.0, scale / max(R.min(), 1e-300)), p)
    r = R[:, None] * xi[None]
    w = wd[:, None] * wxi[None] * R[:, None] * r ** (d - 1)
    x = x0 + r[..., None] * dirs[:, None, :]
    return x.reshape(-1, x0.shape[-1]), w.reshape(-1)


def _embed_dirs(dirs, dim, offset):
    out = np.zeros((len(dirs), dim))
    out[:, offset:offset + dirs.shape[1]] = dirs
    return out


class BallDomain:
    """
    Ball ``|zeta - c| < R`` in flat coordinates.

    Provides the volume (polar around the evaluation point) and the
    boundary sphere.
    """

    def __init__(self, center, radius: float, config: Optional[CFConfig] = None):
        self.center = np.asarray(center, complex)
        self.radius = float(radius)
        self.n = len(self.center)
        self.chart = FlatChart(self.n)
        self.config = config or CFConfig()
        self.G, self.gradG = ball_level(self.chart, self.center, self.radius)
        self.convex = ConvexBarrier(self.center, self.radius)

    def boundary(self, z=None) -> Nodes:
        cfg, d = self.config, 2 * self.n
        dirs, w = sphere_rule(d, cfg.sphere, cfg.seed)
        x = self.chart.to_x(self.center) + self.radius * dirs
        grad = self.gradG(x)
        dens = self.radius ** (d - 1) / np.einsum("ka,ka->k", grad, dirs)
        return Nodes(x, w * dens, grad[:, None, :])

    def volume(self, z) -> Nodes:
        cfg, d = self.config, 2 * self.n
        x0 = self.chart.to_x(np.asarray(z, complex))
        dirs, wd = sphere_rule(d, cfg.sphere, cfg.seed)
        x, w = _polar_slice(self.G, x0, (dirs, wd), cfg.grade * self.radius * 1e-3, cfg.p_radial, self.radius, d)
        return Nodes(x, w, np.zeros((len(w), 0, d)))


class TubeDomain:
    """
    Tube ``{|rho_1| < eps} cap B(c, R)`` around a hypersurface patch and its strata.

    Strata (for a single ball):

    * ``face(+-1)``: rho_1 = +-eps inside the ball (outward normal +-ds);
    * ``side``: |rho_1| < eps on the sphere (outward normal grad tau);
    * ``corner(+-1)``: rho_1 = +-eps on the sphere, oriented as the boundary of the face.

    Parameters
    ----------
    M : GraphManifold
    center : array (n,)
        Point of M at the ball center.
    radius : float
    barrier : Barrier, optional
        Concave barrier (needed for the R and H operators).
    """

    def __init__(self, M: GraphManifold, center, radius: float, barrier: Optional[Barrier] = None,
                 config: Optional[CFConfig] = None):
        self.M = M
        self.n = M.n
        self.center = np.asarray(center, complex)
        self.radius = float(radius)
        self.chart = TubeChart(M)
        self.barrier = barrier
        self.convex = ConvexBarrier(self.center, self.radius)
        self.config = config or CFConfig()
        self.G, self.gradG = ball_level(self.chart, self.center, self.radius)

    # -- node sets --------------------------------------------------------------
    def _dirs(self):
        return sphere_rule(2 * self.n - 1, self.config.sphere, self.config.seed)

    def _center_x(self, z, s):
        u = self.M.coords(np.asarray(z, complex))
        return np.concatenate([[s], u])

    def volume(self, z, eps: float) -> Nodes:
        """Nodes of the tube volume, graded towards the projection of z."""
        cfg, D = self.config, 2 * self.n
        s_half, ws_half = graded(0.0, eps, eps * cfg.s_floor, cfg.p_normal)
        s_all = np.concatenate([-s_half[::-1], s_half])
        ws_all = np.concatenate([ws_half[::-1], ws_half])
        dirs, wd = self._dirs()
        dirs = _embed_dirs(dirs, D, 1)
        xs, ws = [], []
        for s, w_s in zip(s_all, ws_all):
            x0 = self._center_x(z, s)
            x, w = _polar_slice(self.G, x0, (dirs, wd), cfg.grade * abs(s), cfg.p_radial, self.radius, D - 1)
            xs.append(x)
            ws.append(w * w_s)
        x, w = np.concatenate(xs), np.concatenate(ws)
        return Nodes(x, w, np.zeros((len(w), 0, D)))

    def face(self, z, eps: float, sign: int) -> Nodes:
        cfg, D = self.config, 2 * self.n
        dirs, wd = self._dirs()
        x, w = _polar_slice(self.G, self._center_x(z, sign * eps), (_embed_dirs(dirs, D, 1), wd),
                            cfg.grade * eps, cfg.p_radial, self.radius, D - 1)
        nrm = np.zeros((len(w), 1, D))
        nrm[:, 0, 0] = sign
        return Nodes(x, w, nrm)

    def _sphere_points(self, z, s, dirs):
        x0 = self._center_x(z, s)
        R = radial_root(self.G, x0, dirs, self.radius)
        x = x0 + R[:, None] * dirs
        grad = self.gradG(x)
        dens = R ** (dirs.shape[1] - 2) / np.einsum("ka,ka->k", grad, dirs)
        return x, grad, dens

    def side(self, z, eps: float) -> Nodes:
        cfg, D = self.config, 2 * self.n
        dirs, wd = self._dirs()
        dirs = _embed_dirs(dirs, D, 1)
        s_nodes, s_w = graded(-eps, eps, 2 * eps, cfg.p_normal)
        parts = []
        for s, w_s in zip(s_nodes, s_w):
            x, grad, dens = self._sphere_points(z, s, dirs)
            parts.append(Nodes(x, wd * dens * w_s, grad[:, None, :]))
        return Nodes.concat(parts)

    def corner(self, z, eps: float, sign: int) -> Nodes:
        D = 2 * self.n
        dirs, wd = self._dirs()
        dirs = _embed_dirs(dirs, D, 1)
        x, grad, dens = self._sphere_points(z, sign * eps, dirs)
        e = np.zeros((len(x), 1, D))
        e[:, 0, 0] = sign
        return Nodes(x, wd * dens, np.concatenate([e, grad[:, None, :]], axis=1))


# ----------------------------------------------------------------------------
# integration of g ^ omega'_r(eta) ^ omega(zeta)

def form_layout(n: int, r_g: int, monos: Sequence[FormMonomial]):
    """
    Terms of dzetabar_Kg ^ mono ^ dzeta_1..n in canonical order.

    Returns a list of (Kg, mono index, sign, J, K, L): the result is
    ``sign * dzbar_K ^ (dzeta_1..n ^ dzetabar_J ^ dt_L)`` with the dzbar
    factors already moved to the front.
    """
    top = FormMonomial(dzeta=tuple(range(1, n + 1)))
    out = []
    for Kg in itertools.combinations(range(1, n + 1), r_g):
        a = FormMonomial(dzetabar=Kg)
        for p, mono in enumerate(monos):
            s1, m1 = monomial_wedge(a, mono)
            if not s1:
                continue
            s2, m2 = monomial_wedge(m1, top)
            if not s2:
                continue
            front = (-1) ** ((len(m2.dzbar) * (n + len(m2.dzetabar))) % 2)
            out.append((Kg, p, s1 * s2 * front, m2.dzetabar, m2.dzbar, m2.dt))
    return out


def integrate_form(chart, nodes: Nodes, z, g: FormField, r_g: int, eta: JetField, r_kernel: int,
                   simplex_p: int = 4, chunk: int = 20000, t_first: bool = True) -> FormValue:
    """
    Integral of ``g ^ omega'_{r_kernel}(eta) ^ omega(zeta)`` over ``nodes`` x simplex.

    The simplex has dimension ``eta.l``; the kernel's t coordinates are the
    simplex coordinates.
    """
    n, k = chart.n, eta.l
    if r_kernel < 0 or r_kernel > n - 1:
        return {}
    D = chart.dim + k
    c = nodes.normals.shape[1]
    if n + r_g + (n - 1 - r_kernel) + c != D:
        raise ValueError(f"form degree does not match stratum dimension {D - c}")
    tn, tw = simplex_rule(k, simplex_p)
    orient = (-1) ** ((k * (chart.dim - c)) % 2) if t_first else 1
    z = np.asarray(z, complex)
    out: Dict[Tuple[int, ...], complex] = {}
    layout = None
    for start in range(0, len(nodes), max(1, chunk // len(tw))):
        sl = slice(start, start + max(1, chunk // len(tw)))
        x = nodes.x[sl]
        zeta = chart.zeta(x)
        gv = g(zeta)
        # nodes where every coefficient of g vanishes contribute nothing
        live = np.zeros(len(x), bool)
        for v in gv.values():
            live |= np.broadcast_to(np.asarray(v) != 0, live.shape)
        if not live.any():
            continue
        if not live.all():
            x, zeta = x[live], zeta[live]
            gv = {K: np.broadcast_to(np.asarray(v), live.shape)[live] for K, v in gv.items()}
        N = len(x)
        J = chart.jac(x)
        normals = nodes.normals[sl][live]
        weight = nodes.weight[sl][live]
        # tensor with simplex nodes
        zeta_t = np.repeat(zeta, len(tw), axis=0)
        t = np.tile(tn, (N, 1))
        zb = np.broadcast_to(z, zeta_t.shape).copy()
        monos, coeffs = omega_prime_r_batch(eta, r_kernel, zeta_t, zb, t)
        coeffs = coeffs.reshape(N, len(tw), -1)
        if layout is None:
            layout = form_layout(n, r_g, monos)
        w = (weight[:, None] * tw[None]) * orient
        dets = {}
        for Kg, p, sign, Jb, K, L in layout:
            key = (Jb, L)
            if key not in dets:
                rows = np.zeros((N, D, D), complex)
                rows[:, :c, :chart.dim] = normals
                rows[:, c:c + n, :chart.dim] = J
                for a, j in enumerate(Jb):
                    rows[:, c + n + a, :chart.dim] = np.conj(J[:, j - 1])
                for a, ti in enumerate(L):
                    rows[:, c + n + len(Jb) + a, chart.dim + ti - 1] = 1.0
                dets[key] = np.linalg.det(rows)
            gk = gv.get(Kg)
            if gk is None:
                continue
            val = np.sum(w * (sign * np.asarray(gk)[:, None] * dets[key][:, None] * coeffs[:, :, p]))
            out[K] = out.get(K, 0) + val
    return out


def _add(a: FormValue, b: FormValue, scale: complex = 1.0) -> FormValue:
    out = dict(a)
    for K, v in b.items():
        out[K] = out.get(K, 0) + scale * v
    return out


def _scale(a: FormValue, s: complex) -> FormValue:
    return {K: s * v for K, v in a.items()}


# ----------------------------------------------------------------------------
# operators

def bm_reproduce(ball: BallDomain, g: Callable, z) -> complex:
    """
    Boundary Bochner-Martinelli integral of a function over the sphere.

    For g holomorphic on a neighbourhood of the closed ball this reproduces g(z).
    """
    n = ball.n

    def gf(zeta):
        return {(): g(zeta)}

    val = integrate_form(ball.chart, ball.boundary(z), z, gf, 0, bochner_martinelli(n), 0,
                         chunk=ball.config.chunk)
    return cf_prefactor(n, 0) * val.get((), 0)


class TubeOperators:
    """
    The operators T_r, R_r, S_r, H_r on a tube around a hypersurface patch.

    Parameters
    ----------
    domain : TubeDomain
        With a concave barrier attached for R and H.
    """

    def __init__(self, domain: TubeDomain):
        self.dom = domain
        self.n = domain.n
        self.bm = bochner_martinelli(self.n)
        self.conv = domain.convex.kernel()
        self._concave = domain.barrier.kernel() if domain.barrier is not None else None

    @property
    def concave(self) -> JetField:
        if self._concave is None:
            raise ValueError("a concave barrier is required for this operator")
        return self._concave

    def _int(self, nodes, z, g, r_g, etas, r_kernel):
        eta = etas[0] if len(etas) == 1 else interpolate_kernels(etas)
        cfg = self.dom.config
        return integrate_form(self.dom.chart, nodes, z, g, r_g, eta, r_kernel, cfg.p_simplex, cfg.chunk)

    def T(self, g: FormField, r: int, z, eps: float, parts: bool = False):
        """T_r(eps)(g)(z): tube volume with the BM kernel plus the side x Delta^1 term."""
        d = self.dom
        vol = self._int(d.volume(z, eps), z, g, r, [self.bm], r - 1)
        side = self._int(d.side(z, eps), z, g, r, [self.bm, self.conv], r - 1)
        c = cf_prefactor(self.n, r)
        if parts:
            return _scale(vol, c), _scale(side, c)
        return _scale(_add(vol, side), c)

    def R(self, g: FormField, r: int, z, eps: float) -> FormValue:
        """R_r(eps)(g)(z): faces x [0,1] and corners x Delta^2."""
        d = self.dom
        out: FormValue = {}
        for sgn in (1, -1):
            out = _add(out, self._int(d.face(z, eps, sgn), z, g, r, [self.bm, self.concave], r - 1))
            out = _add(out, self._int(d.corner(z, eps, sgn), z, g, r, [self.bm, self.concave, self.conv], r - 1))
        return _scale(out, cf_prefactor(self.n, r))

    def S(self, g: FormField, r: int, z, eps: float) -> FormValue:
        """S_r(eps)(g)(z): side with the convex kernel alone."""
        out = self._int(self.dom.side(z, eps), z, g, r, [self.conv], r)
        return _scale(out, cf_prefactor(self.n, r))

    def H(self, g: FormField, r: int, z, eps: float, parts: bool = False):
        """H_r(eps)(g)(z): faces with the concave kernel plus corners x Delta^1."""
        d = self.dom
        faces: FormValue = {}
        corners: FormValue = {}
        for sgn in (1, -1):
            faces = _add(faces, self._int(d.face(z, eps, sgn), z, g, r, [self.concave], r))
            corners = _add(corners, self._int(d.corner(z, eps, sgn), z, g, r, [self.concave, self.conv], r))
        c = cf_prefactor(self.n, r)
        if parts:
            return _scale(faces, c), _scale(corners, c)
        return _scale(_add(faces, corners), c)

    def J(self, g, r, z, eps):
        return _add(self.T(g, r, z, eps), self.R(g, r, z, eps))

    def N(self, g, r, z, eps):
        return _add(self.S(g, r, z, eps), self.H(g, r, z, eps))


# ----------------------------------------------------------------------------
# epsilon limits, local solution and extension operators

def extrapolate_eps(values, eps, ratio_max: float = 0.95, floor: float = 1e-6):
    """
    Limit eps -> 0 of ladder values under the model v(eps) = v0 + c eps log(eps).

    Parameters
    ----------
    values : array (L, ...)
        Values on the ladder, complex allowed.
    eps : array (L,)
        Strictly decreasing ladder.

    Returns
    -------
    v0 : array (...)
    info : dict
        Successive-difference ratios and the fit residual.

    Raises
    ------
    QuadratureError
        When the ladder differences do not shrink (ratio above ``ratio_max``)
        while still above ``floor`` relative to the values.
    """
    v = np.asarray(values, complex)
    e = np.asarray(eps, float)
    L = len(e)
    flat = v.reshape(L, -1)
    diffs = np.linalg.norm(np.diff(flat, axis=0), axis=1)
    ratios = diffs[1:] / np.maximum(diffs[:-1], 1e-300)
    scale = np.linalg.norm(flat, axis=1).max()
    if len(ratios) and np.any((ratios > ratio_max) & (diffs[1:] > floor * max(scale, 1e-300))):
        raise QuadratureError(f"epsilon ladder does not converge (difference ratios {np.round(ratios, 3)})")
    X = np.stack([np.ones(L), e * np.log(e)], axis=1)
    coef, *_ = np.linalg.lstsq(X, flat, rcond=None)
    resid = float(np.linalg.norm(X @ coef - flat) / max(scale, 1e-300))
    return coef[0].reshape(v.shape[1:]), {"ratios": ratios, "fit_residual": resid}


def _dense(form: FormValue, keys) -> np.ndarray:
    return np.array([form.get(K, 0) for K in keys], complex)


def _keys(n: int, r: int):
    return list(itertools.combinations(range(1, n + 1), r))


def ball_dbar_solve(ball: BallDomain, g: FormField, r: int, z) -> FormValue:
    """
    Solution of dbar u = g on a ball for a dbar-closed (0,r) form g, r >= 1.

    Martinelli-Bochner volume part plus the sphere x [0,1] part with the
    convex barrier; the remaining boundary term has a z-holomorphic kernel
    and vanishes in positive degree.
    """
    if r < 1:
        raise ValueError("degree must be at least 1")
    n, cfg = ball.n, ball.config
    bm = bochner_martinelli(n)
    vol = integrate_form(ball.chart, ball.volume(z), z, g, r, bm, r - 1, cfg.p_simplex, cfg.chunk)
    eta = interpolate_kernels([bm, ball.convex.kernel()])
    side = integrate_form(ball.chart, ball.boundary(z), z, g, r, eta, r - 1, cfg.p_simplex, cfg.chunk)
    return _scale(_add(vol, side), cf_prefactor(n, r))


class LocalSolver:
    """
    Local solution operator for the tangential Cauchy-Riemann equation on a tube patch.

    ``solve(h, r, z) = R_M(h)(z) + u(z)`` where R_M is the epsilon limit of
    the R operator and u solves dbar u = g on the convex ball of the
    adjusted pair, g being the limit of the corner part of H.  The face
    part of H is dropped for r < q, where its kernel vanishes identically.

    Parameters
    ----------
    ops : TubeOperators
        With a concave barrier.
    inner_radius : float
        Radius of the convex ball V (from the adjusted pair).
    ball_config : CFConfig, optional
        Quadrature for the ball solve.
    ratio_max : float
        Ladder stability threshold passed to ``extrapolate_eps``.
    """

    def __init__(self, ops: TubeOperators, inner_radius: float, ball_config: Optional[CFConfig] = None,
                 ratio_max: float = 0.95):
        self.ops = ops
        self.dom = ops.dom
        self.n = ops.n
        self.ball = BallDomain(self.dom.center, inner_radius, ball_config or self.dom.config)
        self.eps = self.dom.config.eps_ladder
        self.ratio_max = ratio_max

    def _limit(self, fn, keys):
        vals = [_dense(fn(e), keys) for e in self.eps]
        v0, info = extrapolate_eps(vals, self.eps, self.ratio_max)
        return {K: v for K, v in zip(keys, v0)}, info

    def R_M(self, h: FormField, r: int, z) -> FormValue:
        """Epsilon limit of R_r(h)(z), a (0, r-1) form at z (ambient components)."""
        out, _ = self._limit(lambda e: self.ops.R(h, r, z, e), _keys(self.n, r - 1))
        return out

    def corner_part(self, h: FormField, r: int, z) -> FormValue:
        """Epsilon limit of the corner part of H_r(h)(z)."""
        def at(e):
            return self.ops.H(h, r, z, e, parts=True)[1]
        out, _ = self._limit(at, _keys(self.n, r))
        return out

    def corner_support(self, h: FormField) -> bool:
        """Whether h is nonzero somewhere on the corner strata of the ladder."""
        c = self.dom.center
        for e in self.eps:
            for sgn in (1, -1):
                nodes = self.dom.corner(c, e, sgn)
                vals = h(self.dom.chart.zeta(nodes.x))
                if any(np.any(np.asarray(v) != 0) for v in vals.values()):
                    return True
        return False

    def solve(self, h: FormField, r: int, z, project: bool = True) -> FormValue:
        """P(h)(z) for a dbar_M-closed (0,r) form h with 1 <= r < q."""
        q = self.ops.dom.barrier.q
        if not 1 <= r < q:
            raise ValueError(f"need 1 <= r < q = {q}")
        out = self.R_M(h, r, z)
        if self.corner_support(h):
            def g(zeta):
                vals = [self.corner_part(h, r, w) for w in zeta.reshape(-1, self.n)]
                return {K: np.array([v.get(K, 0) for v in vals]).reshape(zeta.shape[:-1])
                        for K in _keys(self.n, r)}
            out = _add(out, ball_dbar_solve(self.ball, g, r, z))
        if project and r - 1 > 0:
            from .geometry import restrict_forms
            out = restrict_forms(self.dom.M, out, np.asarray(z, complex))
        return out


def cr_extend(ops: TubeOperators, h: Callable, z, include_faces: bool = False, floor: float = 1e-4):
    """
    Holomorphic extension of a CR function: the epsilon limit of H_0(h)(z) for z off M.

    The face part vanishes for q >= 1 and is skipped unless requested.  The
    side term S_0(h) tends to zero with eps but cancels the leading O(eps)
    error of the corner part at finite eps, so it is added before the limit.

    Returns
    -------
    value : complex
    info : dict
        Ladder values and extrapolation diagnostics.
    """
    def hf(zeta):
        return {(): h(zeta)}

    def at(e):
        if include_faces:
            out = ops.H(hf, 0, z, e)
        else:
            d, c = ops.dom, cf_prefactor(ops.n, 0)
            out = {}
            for sgn in (1, -1):
                out = _add(out, ops._int(d.corner(z, e, sgn), z, hf, 0, [ops.concave, ops.conv], 0), c)
        return _add(out, ops.S(hf, 0, z, e)).get((), 0)

    eps = ops.dom.config.eps_ladder
    vals = [[at(e)] for e in eps]
    v0, info = extrapolate_eps(vals, eps, floor=floor)
    info["ladder"] = [v[0] for v in vals]
    return complex(v0[0]), info


def local_solve_residual(solver: LocalSolver, h: FormField, points, r: int = 1, fd_step: float = 2e-3):
    """
    Relative residual max |dbar_M P(h) - h| / max |h| over graph-coordinate points.

    dbar_M is taken by central differences of the solver output.
    """
    from .geometry import restrict_forms, tangential_cr_at
    M = solver.dom.M
    num, den, per_point = 0.0, 0.0, []

    def P(u):
        out = solver.solve(h, r, M.point(u))
        return out.get((), 0) if r == 1 else out

    for u in np.atleast_2d(np.asarray(points, float)):
        z = M.point(u)
        href = restrict_forms(M, {K: np.asarray(v) for K, v in h(z[None]).items()}, z)
        href = {K: complex(np.ravel(v)[0]) for K, v in href.items()}
        d = tangential_cr_at(M, P, u, h=fd_step, check_box=False)
        err = max(abs(complex(np.ravel(d.get(K, 0))[0]) - v) for K, v in href.items())
        size = max(abs(v) for v in href.values())
        per_point.append(err / size)
        num, den = max(num, err), max(den, size)
    return num / den, per_point
