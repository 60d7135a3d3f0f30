"""
Strong barriers for q-pseudoconcave patches and for convex balls.

For a patch ``M`` with defining functions rho_1..rho_m the concave barrier is

    P(zeta, z) = 2 * [-d f(z) - 1/2 dd f(z) w] + Pi(theta, z) conj(w),
    Phi = <P, w>,   w = zeta - z,

where ``f = sum_k theta_k rho_k + A sum_i rho_i^2`` is the Kohn-regularized
function for the direction ``theta = -rho_k(zeta) / |rho(zeta)|`` and ``Pi``
is the projector (in conjugated coordinates) onto the complement of the
q + m most-positive directions of the complex Hessian of f at z.  With this
normalization, for z on M,

    Re Phi = -f(zeta) + L_z f(w) + A(w) + O(|w|^3),

which is positive for small w when L_z f + A is positive definite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.stats import qmc

from .forms import JetField
from .geometry import GraphManifold


class BarrierError(RuntimeError):
    """Barrier positivity or adjusted-pair search failed."""


def _stack_theta(theta, shape, m):
    theta = np.asarray(theta, dtype=float)
    return np.broadcast_to(theta, shape + (m,))


class Barrier:
    """
    Concave M-barrier (P, Phi) with its components.

    Parameters
    ----------
    M : GraphManifold
    q : int
        Number of negative Levi directions the construction relies on.
    A : float
        Kohn regularization constant.
    concave_scale : float
        Weight of the first-order Taylor part in P (2 makes Re Phi match the
        second-order expansion with unit coefficients).
    """

    def __init__(self, M: GraphManifold, q: int, A: float = 1.0, concave_scale: float = 2.0):
        if not 0 <= q <= M.n - M.m:
            raise ValueError("q out of range")
        self.M, self.q, self.A, self.scale = M, int(q), float(A), float(concave_scale)
        self.n, self.m = M.n, M.m

    # geometry at z -----------------------------------------------------------
    def theta(self, zeta) -> np.ndarray:
        r = self.M.rho_values(zeta)
        norm = np.linalg.norm(r, axis=-1, keepdims=True)
        if np.any(norm == 0):
            raise ValueError("theta is undefined on M; pass theta explicitly")
        return -r / norm

    def _local(self, z):
        """rho, d rho, holomorphic and complex Hessians of rho at z."""
        M = self.M
        return M.rho_values(z), M.drho_dz(z), M.holomorphic_hessian(z), M.complex_hessian(z)

    def _per_unique(self, fn, theta, z):
        """
        Evaluate ``fn(theta, z)`` once per distinct theta when z is a single point.

        Integration batches share one evaluation point z and a handful of
        directions, so the z-side jets and eigendecompositions collapse to
        a few evaluations.
        """
        z = np.asarray(z, complex)
        shape = np.broadcast_shapes(np.shape(theta)[:-1], z.shape[:-1])
        th = np.broadcast_to(np.asarray(theta, float), shape + (self.m,))
        zz = np.broadcast_to(z, shape + (self.n,))
        flat_z = zz.reshape(-1, self.n)
        if len(flat_z) < 2 or not np.all(flat_z == flat_z[0]):
            return fn(th, zz)
        flat_t = th.reshape(-1, self.m)
        uk, inv = np.unique(flat_t[:, 0], return_inverse=True) if self.m == 1 else \
            np.unique(flat_t, axis=0, return_inverse=True)
        uk = uk.reshape(-1, self.m)
        if len(uk) * 2 > len(flat_t):
            return fn(th, zz)
        out = fn(uk, np.broadcast_to(flat_z[0], (len(uk), self.n)))
        inv = inv.reshape(-1)
        if isinstance(out, tuple):
            return tuple(o[inv].reshape(shape + o.shape[1:]) for o in out)
        return out[inv].reshape(shape + out.shape[1:])

    def regularized_jets(self, theta, z):
        """
        First derivatives, holomorphic Hessian and complex Hessian of
        rho_k + A theta_k sum_i rho_i^2 for each k; shapes (..., m, n) and (..., m, n, n).
        """
        return self._per_unique(self._regularized_jets, theta, z)

    def _regularized_jets(self, theta, z):
        rho, d, dd, ddb = self._local(z)
        theta = _stack_theta(theta, rho.shape[:-1], self.m)
        s = np.einsum("...i,...ij->...j", rho, d)
        ss = np.einsum("...i,...ij,...ik->...jk", np.ones_like(rho), d, d) + np.einsum("...i,...ijk->...jk", rho, dd)
        sc = np.einsum("...ij,...ik->...jk", d, np.conj(d)) + np.einsum("...i,...ijk->...jk", rho, ddb)
        tA = 2 * self.A * theta
        d_reg = d + tA[..., :, None] * s[..., None, :]
        dd_reg = dd + tA[..., :, None, None] * ss[..., None, :, :]
        ddb_reg = ddb + tA[..., :, None, None] * sc[..., None, :, :]
        return d_reg, dd_reg, ddb_reg

    def levi_matrix(self, theta, z) -> np.ndarray:
        """Hermitian matrix G of the form w -> L_z f(w) = w^H G w."""
        _, _, ddb = self.regularized_jets(theta, z)
        theta = _stack_theta(theta, ddb.shape[:-3], self.m)
        H = np.einsum("...k,...kij->...ij", theta, ddb)
        G = np.swapaxes(H, -1, -2)
        return 0.5 * (G + np.conj(np.swapaxes(G, -1, -2)))

    def frame(self, theta, z) -> np.ndarray:
        """Rows a_j(theta, z), shape (..., n-q-m, n)."""
        return self._per_unique(self._frame, theta, z)

    def _frame(self, theta, z) -> np.ndarray:
        G = self.levi_matrix(theta, z)
        _, v = np.linalg.eigh(G)
        keep = self.n - self.q - self.m
        if keep < 0:
            raise ValueError("q + m exceeds n")
        return np.conj(np.swapaxes(v[..., :, :keep], -1, -2))

    def projector(self, theta, z) -> np.ndarray:
        """Pi with Pi conj(w) = sum_j a_j conj(a_j . w)."""
        return self._per_unique(self._frame_projector, theta, z)

    def _frame_projector(self, theta, z) -> np.ndarray:
        a = self._frame(theta, z)
        return np.einsum("...ji,...jk->...ik", a, np.conj(a))

    # barrier components -------------------------------------------------------
    def _theta_for(self, zeta, theta):
        if theta is None:
            return self.theta(zeta)
        return _stack_theta(theta, np.asarray(zeta).shape[:-1], self.m)

    def Q(self, zeta, z, theta=None) -> np.ndarray:
        """Q^(k) of the regularized functions, shape (..., m, n)."""
        zeta, z = np.asarray(zeta, complex), np.asarray(z, complex)
        th = self._theta_for(zeta, theta)
        d, dd, _ = self.regularized_jets(th, z)
        w = zeta - z
        return -d - 0.5 * np.einsum("...kij,...j->...ki", dd, w)

    def F(self, zeta, z, theta=None) -> np.ndarray:
        w = np.asarray(zeta, complex) - np.asarray(z, complex)
        return np.einsum("...ki,...i->...k", self.Q(zeta, z, theta), w)

    def Acal(self, zeta, z, theta=None) -> np.ndarray:
        zeta, z = np.asarray(zeta, complex), np.asarray(z, complex)
        th = self._theta_for(zeta, theta)
        a = self.frame(th, z)
        Aj = np.einsum("...ji,...i->...j", a, zeta - z)
        return np.sum(np.abs(Aj) ** 2, axis=-1)

    def P(self, zeta, z, theta=None) -> np.ndarray:
        zeta, z = np.asarray(zeta, complex), np.asarray(z, complex)
        th = self._theta_for(zeta, theta)
        w = zeta - z
        lin = np.einsum("...k,...ki->...i", th, self.Q(zeta, z, th))
        return self.scale * lin + np.einsum("...ik,...k->...i", self.projector(th, z), np.conj(w))

    def Phi(self, zeta, z, theta=None) -> np.ndarray:
        w = np.asarray(zeta, complex) - np.asarray(z, complex)
        return np.sum(self.P(zeta, z, theta) * w, axis=-1)

    def Phi_decomposed(self, zeta, z, theta=None) -> np.ndarray:
        """scale * sum_k theta_k F^(k) + Acal."""
        th = self._theta_for(np.asarray(zeta), theta)
        return self.scale * np.sum(th * self.F(zeta, z, th), axis=-1) + self.Acal(zeta, z, th)

    def taylor_model(self, zeta, z, theta=None) -> np.ndarray:
        """-f(zeta) + L_z f(w) + Acal, the second-order model of Re Phi for z on M."""
        zeta, z = np.asarray(zeta, complex), np.asarray(z, complex)
        th = self._theta_for(zeta, theta)
        rho_zeta = self.M.rho_values(zeta)
        f_zeta = np.sum(th * rho_zeta, axis=-1) + self.A * np.sum(rho_zeta ** 2, axis=-1)
        w = zeta - z
        G = self.levi_matrix(th, z)
        lev = np.einsum("...i,...ij,...j->...", np.conj(w), G, w).real
        return -f_zeta + lev + self.Acal(zeta, z, th)

    def positivity(self, theta, z) -> np.ndarray:
        """Smallest eigenvalue of L_z f + Acal (as Hermitian forms in w)."""
        G = self.levi_matrix(theta, z)
        a = self.frame(theta, z)
        Acal = np.einsum("...ji,...jk->...ik", np.conj(a), a)
        return np.linalg.eigvalsh(G + Acal)[..., 0]

    # kernel -------------------------------------------------------------------
    def kernel(self, h: float = 1e-6, theta=None) -> JetField:
        """
        eta = P / Phi as a JetField.

        For m = 1 the direction is locally constant off M, so the dzetabar
        jet is analytic: dP/dzetabar = Pi and dPhi/dzetabar_l = sum_i Pi_il w_i.
        The dzbar jet is analytic in w with central differences of the
        z-side data only.  Other jets fall back to central differences.
        """
        n = self.n

        def func(zeta, z, t):
            P = self.P(zeta, z, theta)
            return P / np.sum(P * (zeta - z), axis=-1, keepdims=True)

        jets = {}
        if self.m == 1:
            def d_zetabar(zeta, z, t):
                th = self._theta_for(zeta, theta)
                P = self.P(zeta, z, th)
                w = zeta - z
                Phi = np.sum(P * w, axis=-1)[..., None, None]
                Pi = self.projector(th, z)
                dPhi = np.einsum("...il,...i->...l", Pi, w)
                return Pi / Phi - P[..., :, None] * dPhi[..., None, :] / Phi ** 2

            jets["zetabar"] = d_zetabar

        def zside(th, z):
            d, dd, _ = self._regularized_jets(th, z)
            return d, dd, self._frame_projector(th, z)

        def d_zbar(zeta, z, t):
            # only the z-side data (d, dd, Pi) depends on zbar beyond conj(w);
            # differentiate it at the few distinct (theta, z) pairs
            th = self._theta_for(zeta, theta)
            w = zeta - z
            P = self.P(zeta, z, th)
            Phi = np.sum(P * w, axis=-1)
            d0, dd0, Pi = self._per_unique(zside, th, z)
            cols = []
            for j in range(n):
                parts = []
                for step in (h, 1j * h):
                    e = np.zeros(n, complex)
                    e[j] = step
                    plus = self._per_unique(zside, th, z + e)
                    minus = self._per_unique(zside, th, z - e)
                    parts.append([(a - b) / (2 * h) for a, b in zip(plus, minus)])
                dd_, ddd_, dPi_ = [0.5 * (x + 1j * y) for x, y in zip(*parts)]
                dlin = -dd_ - 0.5 * np.einsum("...kil,...l->...ki", ddd_, w)
                dP = self.scale * np.einsum("...k,...ki->...i", th, dlin) \
                    + np.einsum("...ik,...k->...i", dPi_, np.conj(w)) - Pi[..., :, j]
                dPhi = np.sum(dP * w, axis=-1)
                cols.append(dP / Phi[..., None] - P * (dPhi / Phi ** 2)[..., None])
            return np.stack(cols, axis=-1)

        jets["zbar"] = d_zbar
        return JetField(func, n, 0, h, jets)


@dataclass
class ConvexBarrier:
    """Ball barrier for tau = |zeta - c|^2 - R^2: P = conj(zeta - c), Phi = <P, zeta - z>."""

    center: np.ndarray
    radius: float

    def tau(self, zeta):
        return np.sum(np.abs(np.asarray(zeta) - self.center) ** 2, axis=-1) - self.radius ** 2

    def P(self, zeta, z=None):
        return np.conj(np.asarray(zeta, complex) - self.center)

    def Phi(self, zeta, z):
        zeta = np.asarray(zeta, complex)
        return np.sum(self.P(zeta) * (zeta - np.asarray(z, complex)), axis=-1)

    def kernel(self, h: float = 1e-6) -> JetField:
        n = len(self.center)
        c = np.asarray(self.center, complex)

        def func(zeta, z, t):
            P = np.conj(zeta - c)
            return P / np.sum(P * (zeta - z), axis=-1, keepdims=True)

        def d_zetabar(zeta, z, t):
            P = np.conj(zeta - c)
            w = zeta - z
            Phi = np.sum(P * w, axis=-1)[..., None, None]
            return np.eye(n) / Phi - P[..., :, None] * w[..., None, :] / Phi ** 2

        def d_zbar(zeta, z, t):
            return np.zeros(zeta.shape[:-1] + (n, n), complex)

        return JetField(func, n, 0, h, {"zetabar": d_zetabar, "zbar": d_zbar})


def build_barrier(M: GraphManifold, q: int, A: float = 1.0, samples=None, lambda_min: float = 1e-6,
                  thetas: Optional[Sequence] = None) -> Barrier:
    """
    Assemble the concave barrier and verify positivity of L_z f + Acal.

    Parameters
    ----------
    samples : array (k, n), optional
        Points of M where positivity is checked (default: the origin).
    thetas : sequence, optional
        Directions to check (default: +-1 for m = 1, else coordinate axes and their negatives).

    Raises
    ------
    BarrierError
        If the smallest eigenvalue drops below ``lambda_min`` at a sample.
    """
    b = Barrier(M, q, A)
    pts = np.atleast_2d(np.asarray(samples if samples is not None else np.zeros(M.n), complex))
    if thetas is None:
        eye = np.eye(M.m)
        thetas = list(eye) + list(-eye)
    worst = np.inf
    for th in thetas:
        worst = min(worst, float(b.positivity(np.asarray(th, float), pts).min()))
    if worst < lambda_min:
        raise BarrierError(f"Levi form plus complement term not positive (min eigenvalue {worst:.3e})")
    b.lambda_min = worst
    return b


def check_strong_barrier(b: Barrier, zetas, zs, C_min: float = 1e-3, min_sep: float = 1e-12) -> dict:
    """
    Sampled constant of the strong-barrier inequality |Phi| >= C (rho + |zeta - z|^2).

    Also fits the Taylor residual |Re Phi - model| against |zeta - z|^3.
    """
    zetas, zs = np.asarray(zetas, complex), np.asarray(zs, complex)
    sep = np.linalg.norm(zetas - zs, axis=-1)
    if np.any(sep < min_sep):
        raise ValueError("pairs with zeta = z are outside the barrier domain")
    rho = np.linalg.norm(b.M.rho_values(zetas), axis=-1)
    if np.any(rho == 0):
        raise ValueError("zeta must lie off M")
    Phi = b.Phi(zetas, zs)
    ratio = np.abs(Phi) / (rho + sep ** 2)
    resid = np.abs(Phi.real - b.taylor_model(zetas, zs))
    K = float(np.max(resid / sep ** 3))
    # least-squares cubic coefficient on log scale as a second estimate
    mask = resid > 0
    slope = float(np.polyfit(np.log(sep[mask]), np.log(resid[mask]), 1)[0]) if mask.sum() > 2 else np.nan
    C_est = float(ratio.min())
    return {"samples": len(sep), "C_est": C_est, "passed": C_est >= C_min, "taylor_K": K,
            "taylor_slope": slope, "imag_over_real": float(np.max(np.abs(Phi.imag) / np.abs(Phi.real)))}


@dataclass
class AdjustedPair:
    center: np.ndarray
    R: float
    r: float
    c: float
    samples: int


def sobol(n_points: int, dim: int, seed: int = 0) -> np.ndarray:
    """Scrambled Sobol points in [0, 1)^dim."""
    m = int(np.ceil(np.log2(max(n_points, 2))))
    pts = qmc.Sobol(dim, scramble=True, seed=seed).random_base2(m)
    return pts[:n_points]


def sphere_directions(k: int, dim: int, seed: int = 0) -> np.ndarray:
    """Quasi-uniform unit vectors in R^dim."""
    from scipy.special import ndtri

    u = np.clip(sobol(k, dim, seed), 1e-12, 1 - 1e-12)
    g = ndtri(u)
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def ball_points(k: int, n: int, center, radius, seed: int = 0) -> np.ndarray:
    """Quasi-uniform points in the complex ball of given radius."""
    d = sphere_directions(k, 2 * n, seed)
    rad = radius * sobol(k, 1, seed + 7)[:, 0] ** (1.0 / (2 * n))
    v = d * rad[:, None]
    return np.asarray(center, complex) + v[:, :n] + 1j * v[:, n:]


def manifold_sphere_points(M: GraphManifold, center, R: float, k: int, seed: int = 0) -> np.ndarray:
    """Points of M at ambient distance R from ``center`` (a point of M), along quasi-uniform graph directions."""
    u0 = M.coords(np.asarray(center, complex))
    out = []
    for d in sphere_directions(k, M.dim, seed):
        def gap(s):
            return np.linalg.norm(M.point(u0 + s * d) - center) - R
        hi = R
        while gap(hi) < 0:
            hi *= 2
            if hi > 1e3 * R:
                raise BarrierError("manifold sphere search diverged")
        out.append(M.point(u0 + brentq(gap, 0.0, hi, xtol=1e-14) * d))
    return np.array(out)


def _theta_samples(m: int, k: int = 16, seed: int = 0):
    if m == 1:
        return [np.array([1.0]), np.array([-1.0])]
    return list(sphere_directions(k, m, seed))


def find_adjusted_pair(b: Barrier, z0, R: float, levels: int = 6, n_boundary: int = 256, n_inner: int = 256,
                       seed: int = 0, c_min: float = 0.0) -> AdjustedPair:
    """
    Largest r in {R/2, R/4, ...} with sampled inf Re Phi > c_min over (M cap bU) x V(r).

    The direction theta is undefined on M itself, so the infimum also runs
    over sampled directions.
    """
    z0 = np.asarray(z0, complex)
    if b.M.defect(z0) > 1e-10:
        raise ValueError("center must lie on M")
    zetas = manifold_sphere_points(b.M, z0, R, n_boundary, seed)
    thetas = _theta_samples(b.m, seed=seed)
    for k in range(1, levels + 1):
        r = R / 2 ** k
        zs = ball_points(n_inner, b.n, z0, r, seed + k)
        ZE = np.repeat(zetas[:, None], len(zs), axis=1)
        ZZ = np.repeat(zs[None], len(zetas), axis=0)
        inf = min(float(b.Phi(ZE, ZZ, th).real.min()) for th in thetas)
        if inf > c_min:
            return AdjustedPair(z0, R, r, inf, len(zetas) * len(zs) * len(thetas))
    raise BarrierError(f"no radius in R/2..R/{2 ** levels} passes (last inf {inf:.3e})")
