"""
Almost CR structures near the induced one, and their transport under
near-identity maps.

A deformation form ``mu`` is stored as its values on the tangential frame,
``mu[..., s, a] = mu^s(Zbar_a)``, where ``Zbar_a = d/dzbar_a - sum_l
(d rho_l/dzbar_a) P''_l`` and ``mu^s`` is the coefficient of d/dz_s.  In the
normalized gauge (``sum_j mu^s_j pbar^j_l = 0``) these values coincide with
the dzbar-coefficients, so ``normalize`` is right multiplication by the
tangential projector.

Functions on the patch are callables of graph coordinates ``u``;
derivatives along complex vector fields are central differences in ``u``
contracted with the field's action on the coordinate functions, so they
never depend on how a function is extended off the manifold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import null_space

from .geometry import GraphManifold


class DeformationError(RuntimeError):
    """Non-contracting inverse iteration, singular pushforward system or inadmissible form."""


# ----------------------------------------------------------------------------
# frames and vector fields in graph coordinates

@dataclass
class PatchFrame:
    """Batched frame data: rz, rzb (..., m, n), P = [P'] (..., n, m), Pbar, and Pi (..., n, n)."""

    rz: np.ndarray
    rzb: np.ndarray
    P: np.ndarray
    Pbar: np.ndarray
    Pi: np.ndarray


def frame_from_conormal(rz) -> PatchFrame:
    """Frame from the holomorphic conormal rows ``rz`` (..., m, n) of real defining functions."""
    rz = np.asarray(rz, complex)
    rzb = rz.conj()
    gram = rz @ np.swapaxes(rzb, -1, -2)
    P = np.swapaxes(rzb, -1, -2) @ np.linalg.inv(gram)
    Pbar = P.conj()
    n = rz.shape[-1]
    Pi = np.eye(n) - Pbar @ rzb
    return PatchFrame(rz, rzb, P, Pbar, Pi)


def patch_frame(M: GraphManifold, u) -> PatchFrame:
    return frame_from_conormal(M.drho_dz(M.point(u)))


def graph_velocity(M: GraphManifold, a, b) -> np.ndarray:
    """
    Action X(u) of X = sum a_i d/dz_i + b_i d/dzbar_i on the graph coordinates.

    Coordinates are ordered (y_1..y_m, x_{m+1}, y_{m+1}, ..., x_n, y_n).
    """
    a, b = np.asarray(a, complex), np.asarray(b, complex)
    m = M.m
    c = np.empty(a.shape[:-1] + (M.dim,), complex)
    c[..., :m] = (a[..., :m] - b[..., :m]) / 2j
    c[..., m::2] = (a[..., m:] + b[..., m:]) / 2
    c[..., m + 1::2] = (a[..., m:] - b[..., m:]) / 2j
    return c


def graph_jacobian(g: Callable, u, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``g(u)``; the derivative axis is inserted right after the point axes."""
    u = np.asarray(u, float)
    lead = u.ndim - 1
    cols = []
    for a in range(u.shape[-1]):
        e = np.zeros(u.shape[-1])
        e[a] = h
        cols.append((np.asarray(g(u + e)) - np.asarray(g(u - e))) / (2 * h))
    return np.stack(cols, axis=lead)


def _along(c, jac) -> np.ndarray:
    """Contract field coefficients c (..., F, dim) with a Jacobian (..., dim, *shape) -> (..., F, *shape)."""
    lead = c.ndim - 2
    extra = jac.ndim - lead - 1
    J = jac.reshape(jac.shape[:lead + 1] + (-1,))
    out = c @ J
    return out.reshape(c.shape[:-1] + jac.shape[lead + 1:lead + 1 + extra])


def zbar_fields(M: GraphManifold, fr: PatchFrame) -> np.ndarray:
    """Graph-coordinate coefficients of Zbar_1..Zbar_n, shape (..., n, dim)."""
    b = np.swapaxes(fr.Pi, -1, -2)  # row a holds the dzbar-components of Zbar_a
    return graph_velocity(M, np.zeros_like(b), b)


def tau_fields(M: GraphManifold, fr: PatchFrame) -> np.ndarray:
    """Coefficients of tau(d/dz_k) = d/dz_k - sum_l (d rho_l/dz_k) P''_l, shape (..., n, dim)."""
    n = fr.rz.shape[-1]
    a = np.broadcast_to(np.eye(n, dtype=complex), fr.Pi.shape)
    # row k: -sum_l rz[l, k] Pbar[:, l]
    b = -np.swapaxes(fr.Pbar @ fr.rz, -1, -2)
    return graph_velocity(M, a, b)


def dbar_M(M: GraphManifold, g: Callable, u, h: float = 1e-5) -> np.ndarray:
    """Values (dbar_M g)(Zbar_a), shape (..., n, *shape of g)."""
    fr = patch_frame(M, u)
    return _along(zbar_fields(M, fr), graph_jacobian(g, u, h))


def tau_derivative(M: GraphManifold, g: Callable, u, h: float = 1e-5) -> np.ndarray:
    """The derivatives d^tau g / dz_k, shape (..., n, *shape of g)."""
    fr = patch_frame(M, u)
    return _along(tau_fields(M, fr), graph_jacobian(g, u, h))


# ----------------------------------------------------------------------------
# deformation forms

def normalize_mu(mu, fr: PatchFrame) -> np.ndarray:
    """Gauge correction mu - (mu pbar) d rho/dzbar; agrees with mu on the tangential frame."""
    return np.asarray(mu, complex) @ fr.Pi


def normalization_residual(mu, fr: PatchFrame) -> float:
    return float(np.max(np.abs(np.asarray(mu) @ fr.Pbar), initial=0.0))


class DeformationForm:
    """
    T'(G)-valued (0,1) form on a patch, normalized on evaluation.

    Parameters
    ----------
    M : GraphManifold
    coeffs : callable
        ``coeffs(u)`` returns dzbar-coefficients (..., n, n) with [s, j] = mu^s_j.
    """

    def __init__(self, M: GraphManifold, coeffs: Callable):
        self.M = M
        self.coeffs = coeffs

    def __call__(self, u) -> np.ndarray:
        return normalize_mu(self.coeffs(u), patch_frame(self.M, u))

    @classmethod
    def zero(cls, M: GraphManifold) -> "DeformationForm":
        n = M.n
        return cls(M, lambda u: np.zeros(np.shape(u)[:-1] + (n, n), complex))

    @classmethod
    def dbar_of(cls, M: GraphManifold, f: Callable, h: float = 1e-5) -> "DeformationForm":
        """The form dbar_M f for an ambient vector function f(z) (..., n)."""
        def coeffs(u):
            vals = dbar_M(M, lambda v: f(M.point(v)), u, h)  # (..., a, s)
            return np.swapaxes(vals, -1, -2)
        return cls(M, coeffs)


def admissibility(M: GraphManifold, mu, u) -> np.ndarray:
    """
    Spectral radius of (pi'' conj(tau mu))^2 on T''(M).

    The structure defined by mu is an almost CR structure when this stays
    below 1.
    """
    fr = patch_frame(M, u)
    vals = mu(u) if callable(mu) else np.asarray(mu)
    K = fr.Pi @ vals.conj() @ fr.Pi.conj() @ vals
    return np.max(np.abs(np.linalg.eigvals(K)), axis=-1)


def check_admissible(M: GraphManifold, mu, u, margin: float = 0.1) -> float:
    r = float(np.max(admissibility(M, mu, u)))
    if r >= 1 - margin:
        raise DeformationError(f"deformation not admissible: spectral radius {r:.3f} >= {1 - margin:.3f}")
    return r


def dbar_mu(M: GraphManifold, g: Callable, mu, u, h: float = 1e-5) -> np.ndarray:
    """(dbar^mu g)(Zbar_a) = Zbar_a g - sum_j (d^tau g/dz_j) mu^j_a for scalar g."""
    fr = patch_frame(M, u)
    jac = graph_jacobian(g, u, h)
    zg = _along(zbar_fields(M, fr), jac)
    tg = _along(tau_fields(M, fr), jac)
    vals = mu(u) if callable(mu) else np.asarray(mu)
    return zg - np.einsum("...j,...ja->...a", tg, vals)


def integrability_residual(M: GraphManifold, mu: Callable, u, h: float = 1e-4) -> np.ndarray:
    """
    The (0,2) residual Phi^i(mu) evaluated on frame pairs, shape (..., n, n, n) as [i, a, b].

    Phi^i = dbar_M mu^i - sum_{k,j} (d^tau mu^i_j/dz_k) mu^k ^ Zbar^j
            - sum_j mu^i_j sum_l (dbar_M pbar^j_l - sum_k (d^tau pbar^j_l/dz_k) mu^k) ^ mu(rho_l)
    with mu(rho_l) = sum_j (d rho_l/dz_j) mu^j.  Zero exactly when the
    deformed structure is integrable.
    """
    u = np.asarray(u, float)
    fr = patch_frame(M, u)
    Zc, Tc = zbar_fields(M, fr), tau_fields(M, fr)
    vals = mu(u)
    jm = graph_jacobian(mu, u, h)  # (..., dim, i, j)
    Zmu = _along(Zc, jm)  # (..., a, i, j)
    Tmu = _along(Tc, jm)  # (..., k, i, j)
    jp = graph_jacobian(lambda v: patch_frame(M, v).Pbar, u, h)  # (..., dim, j, l)
    Zp = _along(Zc, jp)  # (..., a, j, l)
    Tp = _along(Tc, jp)  # (..., k, j, l)
    Pi = fr.Pi  # Zbar^j(Zbar_b) = Pi[j, b]
    # dbar_M mu^i (a, b) = sum_j Zbar_a(mu^i_j) Pi_jb - (a <-> b)
    t1 = np.einsum("...aij,...jb->...iab", Zmu, Pi)
    t1 = t1 - np.swapaxes(t1, -1, -2)
    # sum_{k,j} Tmu[k,i,j] (mu[k,a] Pi[j,b] - mu[k,b] Pi[j,a])
    t2 = np.einsum("...kij,...ka,...jb->...iab", Tmu, vals, Pi)
    t2 = t2 - np.swapaxes(t2, -1, -2)
    # theta[j, l, a] = Zbar_a pbar^j_l - sum_k Tp[k,j,l] mu[k,a]
    theta = np.einsum("...ajl->...jla", Zp) - np.einsum("...kjl,...ka->...jla", Tp, vals)
    nu = np.einsum("...lq,...qb->...lb", fr.rz, vals)  # mu(rho_l)(Zbar_b)
    w = np.einsum("...ij,...jla,...lb->...iab", vals, theta, nu)
    t3 = w - np.swapaxes(w, -1, -2)
    return t1 - t2 - t3


# ----------------------------------------------------------------------------
# near-identity maps

class NearIdentityMap:
    """
    F(z) = z + f(z) on an ambient neighbourhood, with the inverse G(w) = w + g(w) on demand.

    Parameters
    ----------
    f : callable
        Ambient displacement, (..., n) complex -> (..., n) complex.
    """

    def __init__(self, f: Callable, tol: float = 1e-13, max_iter: int = 100):
        self.f = f
        self.tol = tol
        self.max_iter = max_iter
        self.has_inverse = False

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, complex)
        return z + self.f(z)

    def g(self, w) -> np.ndarray:
        """Inverse displacement by the fixed point g <- -f(w + g), started at g = 0."""
        if not self.has_inverse:
            raise DeformationError("inverse not populated; call invert_map first")
        w = np.asarray(w, complex)
        g = np.zeros_like(w)
        prev = np.inf
        for _ in range(self.max_iter):
            new = -self.f(w + g)
            step = float(np.max(np.abs(new - g), initial=0.0))
            g = new
            if step < self.tol:
                return g
            if step > prev and step > 1e-6:
                raise DeformationError(f"inverse iteration is not contracting (increment {step:.2e})")
            prev = step
        if step > 1e-10:
            raise DeformationError(f"inverse iteration stalled at increment {step:.2e}")
        return g

    def inverse(self, w) -> np.ndarray:
        w = np.asarray(w, complex)
        return w + self.g(w)


def c1_norm(f: Callable, z, h: float = 1e-6) -> float:
    """max over samples of |f| and its first real partial derivatives, componentwise."""
    z = np.asarray(z, complex)
    best = float(np.max(np.abs(f(z))))
    n = z.shape[-1]
    for i in range(n):
        for step in (h, 1j * h):
            e = np.zeros(n, complex)
            e[i] = step
            d = (f(z + e) - f(z - e)) / (2 * h)
            best = max(best, float(np.max(np.abs(d))))
    return best


def exp_map(xi: Callable) -> NearIdentityMap:
    """Exponential map of the flat ambient metric: z -> z + xi(z)."""
    return NearIdentityMap(xi)


def invert_map(F: NearIdentityMap, samples=None, eps: float = 0.1) -> NearIdentityMap:
    """
    Populate the inverse of F.

    When ``samples`` are given, the C^1 size of f is checked against ``eps``
    and the fixed point is run once on them to detect non-contraction early.
    """
    if samples is not None:
        size = c1_norm(F.f, samples)
        if size >= eps:
            raise DeformationError(f"|f|_1 = {size:.3g} exceeds the contraction budget {eps}")
    F.has_inverse = True
    if samples is not None:
        F.g(samples)
    return F


# ----------------------------------------------------------------------------
# pushforward

@dataclass
class Pushforward:
    """mu* at the image points w = F(z), with consistency residuals."""

    points: np.ndarray
    mu_star: np.ndarray
    tangency: float
    span_residual: float
    frame: PatchFrame


def image_frame(M: GraphManifold, F: Callable, u, h: float = 1e-5) -> PatchFrame:
    """
    Frame of F(M) at F(z): the conormal is the annihilator of DF applied to the tangent space.
    """
    jac = graph_jacobian(lambda v: F(M.point(v)), u, h)  # (..., dim, n)
    real = np.concatenate([jac.real, jac.imag], axis=-1)  # rows: tangent vectors in (x, y)
    flat = real.reshape(-1, M.dim, 2 * M.n)
    rz = np.empty((len(flat), M.m, M.n), complex)
    for p, T in enumerate(flat):
        N = null_space(T)  # (2n, m) real conormals
        if N.shape[1] != M.m:
            raise DeformationError("image is not a submanifold of the expected codimension")
        rz[p] = (N[:M.n].T - 1j * N[M.n:].T) / 2
    return frame_from_conormal(rz.reshape(real.shape[:-2] + (M.m, M.n)))


def pushforward_mu(M: GraphManifold, mu, F: Callable, u, h: float = 1e-5) -> Pushforward:
    """
    Form mu* on F(M) with DF[T''_mu(M)] = T''_mu*(F(M)).

    The pushed fields V_i = DF[Xbar_i], Xbar_i = Zbar_i - tau mu(Zbar_i), have
    holomorphic part a_i = -mu*(Y_i) with Y_i = b_i + sum_l d rho*_l(a_i) pbar*_l
    their T''(M*) component; mu* is the solution of this linear system in the
    normalized gauge, solved per node by dense least squares.
    """
    u = np.asarray(u, float)
    fr = patch_frame(M, u)
    vals = mu(u) if callable(mu) else np.asarray(mu, complex)
    n, m = M.n, M.m
    # Xbar_i: a = -mu[:, i], b = Pi[:, i] + sum_l (sum_j rz[l, j] mu[j, i]) pbar_l
    A = -np.swapaxes(vals, -1, -2)  # row i
    nu = fr.rz @ vals  # (..., l, i)
    B = np.swapaxes(fr.Pi + fr.Pbar @ nu, -1, -2)
    c = graph_velocity(M, A, B)  # (..., i, dim)
    jac = graph_jacobian(lambda v: F(M.point(v)), u, h)  # (..., dim, s)
    a = c @ jac
    b = c @ jac.conj()
    star = image_frame(M, F, u, h)
    drho_V = np.einsum("...ls,...is->...il", star.rz, a) + np.einsum("...ls,...is->...il", star.rzb, b)
    tangency = float(np.max(np.abs(drho_V), initial=0.0))
    # Y_i = b_i + sum_l (rz* . a_i) pbar*_l
    Y = b + np.einsum("...il,...sl->...is", np.einsum("...ls,...is->...il", star.rz, a), star.Pbar)
    # mu* [Y^T | pbar*] = [-a^T | 0]
    lhs = np.concatenate([np.swapaxes(Y, -1, -2), star.Pbar], axis=-1)  # (..., n, n+m)
    rhs = np.concatenate([-np.swapaxes(a, -1, -2), np.zeros(a.shape[:-2] + (n, m), complex)], axis=-1)
    L = lhs.reshape(-1, n, n + m)
    R = rhs.reshape(-1, n, n + m)
    out = np.empty((len(L), n, n), complex)
    worst = 0.0
    for p in range(len(L)):
        sv = np.linalg.svd(L[p], compute_uv=False)
        if sv[-1] < 1e-8 * sv[0]:
            raise DeformationError("pushforward system is near-singular")
        X, *_ = np.linalg.lstsq(L[p].T, R[p].T, rcond=None)
        out[p] = X.T
        worst = max(worst, float(np.max(np.abs(X.T @ L[p] - R[p]))))
    mu_star = out.reshape(vals.shape)
    pts = F(M.point(u))
    return Pushforward(pts, mu_star, tangency, worst, star)
