"""
Polynomials in (z_1..z_n, zbar_1..zbar_n) with exact Wirtinger derivatives.

Used for model defining functions; evaluation is vectorized over leading
axes of the point array.
"""

from __future__ import annotations

from typing import Dict, Iterable, Mapping, Tuple

import numpy as np

Exponent = Tuple[int, ...]


class Poly:
    """
    Polynomial sum_c c * z^a * zbar^b stored as {(a_1..a_n, b_1..b_n): c}.

    Parameters
    ----------
    terms : mapping
        Exponent tuples of length 2n mapped to complex coefficients.
    n : int
        Number of complex variables.
    """

    __slots__ = ("terms", "n")

    def __init__(self, terms: Mapping[Exponent, complex] | None = None, n: int = 1):
        self.n = int(n)
        clean: Dict[Exponent, complex] = {}
        for e, c in (terms or {}).items():
            e = tuple(int(k) for k in e)
            if len(e) != 2 * self.n or min(e, default=0) < 0:
                raise ValueError(f"bad exponent {e} for n={n}")
            c = complex(c)
            if c != 0:
                clean[e] = clean.get(e, 0) + c
        self.terms = {e: c for e, c in clean.items() if c != 0}

    # constructors
    @classmethod
    def const(cls, c, n) -> "Poly":
        return cls({(0,) * (2 * n): c}, n)

    @classmethod
    def z(cls, i, n) -> "Poly":
        """Coordinate z_i (0-based)."""
        e = [0] * (2 * n)
        e[i] = 1
        return cls({tuple(e): 1.0}, n)

    @classmethod
    def zbar(cls, i, n) -> "Poly":
        e = [0] * (2 * n)
        e[n + i] = 1
        return cls({tuple(e): 1.0}, n)

    @classmethod
    def x(cls, i, n) -> "Poly":
        return (cls.z(i, n) + cls.zbar(i, n)) * 0.5

    @classmethod
    def y(cls, i, n) -> "Poly":
        return (cls.z(i, n) - cls.zbar(i, n)) * (-0.5j)

    # arithmetic
    def __add__(self, other):
        if not isinstance(other, Poly):
            other = Poly.const(other, self.n)
        out = dict(self.terms)
        for e, c in other.terms.items():
            out[e] = out.get(e, 0) + c
        return Poly(out, self.n)

    __radd__ = __add__

    def __neg__(self):
        return Poly({e: -c for e, c in self.terms.items()}, self.n)

    def __sub__(self, other):
        return self + (-other if isinstance(other, Poly) else -other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Poly):
            return Poly({e: c * other for e, c in self.terms.items()}, self.n)
        out: Dict[Exponent, complex] = {}
        for e1, c1 in self.terms.items():
            for e2, c2 in other.terms.items():
                e = tuple(a + b for a, b in zip(e1, e2))
                out[e] = out.get(e, 0) + c1 * c2
        return Poly(out, self.n)

    __rmul__ = __mul__

    def __pow__(self, k: int):
        out = Poly.const(1.0, self.n)
        for _ in range(k):
            out = out * self
        return out

    def conj(self) -> "Poly":
        n = self.n
        return Poly({e[n:] + e[:n]: np.conj(c) for e, c in self.terms.items()}, n)

    def degree(self) -> int:
        return max((sum(e) for e in self.terms), default=0)

    def is_real(self, tol=1e-14) -> bool:
        diff = self - self.conj()
        return all(abs(c) <= tol for c in diff.terms.values())

    # calculus
    def d(self, i: int, bar: bool = False) -> "Poly":
        """Wirtinger derivative d/dz_i (or d/dzbar_i), 0-based."""
        k = self.n + i if bar else i
        out = {}
        for e, c in self.terms.items():
            if e[k]:
                e2 = list(e)
                e2[k] -= 1
                out[tuple(e2)] = c * e[k]
        return Poly(out, self.n)

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=complex)
        if z.shape[-1] != self.n:
            raise ValueError(f"expected last axis {self.n}, got {z.shape}")
        if not self.terms:
            return np.zeros(z.shape[:-1], dtype=complex)
        zb = np.conj(z)
        vars_ = np.concatenate([z, zb], axis=-1)
        exps = np.array(list(self.terms.keys()))
        coefs = np.array(list(self.terms.values()))
        maxe = exps.max(axis=0)
        # power tables per variable keep evaluation cheap for low degree
        out = np.zeros(z.shape[:-1], dtype=complex)
        powers = [np.stack([vars_[..., k] ** p for p in range(maxe[k] + 1)], axis=-1) for k in range(2 * self.n)]
        for e, c in zip(exps, coefs):
            term = np.full(z.shape[:-1], c, dtype=complex)
            for k in np.nonzero(e)[0]:
                term = term * powers[k][..., e[k]]
            out = out + term
        return out

    def __repr__(self):
        return f"Poly(n={self.n}, terms={len(self.terms)}, degree={self.degree()})"


def graph_term(coeff, y_exp: Iterable[int], z_exp: Iterable[int], zbar_exp: Iterable[int], n: int, m: int) -> Poly:
    """
    Monomial coeff * y^a * z''^b * zbar''^c in ambient variables.

    ``y`` are the imaginary parts of z_1..z_m and ``z''`` are z_{m+1}..z_n.
    """
    y_exp, z_exp, zbar_exp = list(y_exp), list(z_exp), list(zbar_exp)
    if len(y_exp) != m or len(z_exp) != n - m or len(zbar_exp) != n - m:
        raise ValueError("exponent lengths must be (m, n-m, n-m)")
    out = Poly.const(coeff, n)
    for k, a in enumerate(y_exp):
        out = out * Poly.y(k, n) ** a
    for k, b in enumerate(z_exp):
        out = out * Poly.z(m + k, n) ** b
    for k, c in enumerate(zbar_exp):
        out = out * Poly.zbar(m + k, n) ** c
    return out
