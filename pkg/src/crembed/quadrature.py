"""
Quadrature rules used by the integral operators.

All rules return ``(nodes, weights)`` as numpy arrays.  Sphere rules
integrate against the unnormalized surface measure of S^(d-1).
"""

from __future__ import annotations

from math import gamma, pi

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .barrier import sphere_directions


def gauss(a: float, b: float, p: int):
    x, w = roots_legendre(p)
    return 0.5 * (b - a) * x + 0.5 * (b + a), 0.5 * (b - a) * w


def graded(a: float, b: float, scale: float, p: int = 8, ratio: float = 2.0):
    """
    Composite Gauss rule on [a, b] with geometric panels refined towards ``a``.

    The first panel has width ``scale``; later panels grow by ``ratio``.
    """
    if b <= a:
        raise ValueError("empty interval")
    scale = min(max(scale, 1e-300), b - a)
    edges = [a, a + scale]
    while edges[-1] < b:
        edges.append(min(b, a + (edges[-1] - a) * ratio))
    xs, ws = zip(*(gauss(lo, hi, p) for lo, hi in zip(edges[:-1], edges[1:])))
    return np.concatenate(xs), np.concatenate(ws)


def sphere_area(d: int) -> float:
    """Surface measure of the unit sphere S^(d-1) in R^d."""
    return 2 * pi ** (d / 2) / gamma(d / 2)


def sphere_product(d: int, p: int):
    """
    Product rule on S^(d-1) built recursively from Gauss-Jacobi factors.

    Uses omega = (sqrt(1 - x^2) v, x) with v on S^(d-2); exact for
    polynomials of degree < 2p in x and trapezoid-exact for trigonometric
    degree < 2p on the final circle.
    """
    if d < 2:
        raise ValueError("need d >= 2")
    if d == 2:
        k = 2 * p
        phi = 2 * pi * (np.arange(k) + 0.5) / k
        return np.stack([np.cos(phi), np.sin(phi)], axis=-1), np.full(k, 2 * pi / k)
    alpha = 0.5 * (d - 3)
    x, wx = roots_jacobi(p, alpha, alpha)
    v, wv = sphere_product(d - 1, p)
    s = np.sqrt(1 - x ** 2)
    nodes = np.concatenate([s[:, None, None] * v[None], np.broadcast_to(x[:, None, None], (p, len(v), 1))], axis=-1)
    return nodes.reshape(-1, d), (wx[:, None] * wv[None]).reshape(-1)


def sphere_qmc(d: int, k: int, seed: int = 0):
    """Quasi-uniform directions with equal weights, antithetic pairs included."""
    half = sphere_directions(max(k // 2, 1), d, seed)
    nodes = np.concatenate([half, -half])
    return nodes, np.full(len(nodes), sphere_area(d) / len(nodes))


def sphere_rule(d: int, budget: int, seed: int = 0):
    """Product rule for d <= 4 (``budget`` is the per-factor order), QMC beyond (``budget`` nodes)."""
    if d <= 4:
        return sphere_product(d, budget)
    return sphere_qmc(d, budget, seed)


def simplex_rule(k: int, p: int):
    """
    Rule on the standard simplex {t_i >= 0, sum t_i <= 1} in R^k.

    k = 0 returns one empty node of weight 1; k = 2 uses the collapsed
    (Duffy) square.
    """
    if k == 0:
        return np.zeros((1, 0)), np.ones(1)
    if k == 1:
        x, w = gauss(0.0, 1.0, p)
        return x[:, None], w
    if k == 2:
        a, wa = gauss(0.0, 1.0, p)
        b, wb = gauss(0.0, 1.0, p)
        A, B = np.meshgrid(a, b, indexing="ij")
        W = np.outer(wa, wb) * (1 - A)
        return np.stack([A.ravel(), ((1 - A) * B).ravel()], axis=-1), W.ravel()
    raise ValueError("simplices of dimension > 2 are not used")
