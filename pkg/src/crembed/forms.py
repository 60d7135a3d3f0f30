"""
Exterior algebra in the variables zeta, z (complex n-vectors) and t (real l-vector).

Forms are stored pointwise as tables ``FormMonomial -> complex``.  The
canonical factor order is dzeta < dz < dzetabar < dzbar < dt, ascending
within each group, and all signs are relative to that order.  Indices are
1-based, as in ``dzeta_1 ^ dzeta_2``.

The Cauchy-Fantappie kernels ``omega'(eta)`` and their pieces
``omega'_r(eta)`` (r factors in dzbar, n-r-1 factors in dzetabar/dt) are
built from a :class:`JetField` holding ``eta(zeta, z, t)`` and its first
derivatives.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, Iterable, Mapping, Optional, Tuple

import numpy as np

GROUPS = ("dzeta", "dz", "dzetabar", "dzbar", "dt")
_GROUP_RANK = {g: i for i, g in enumerate(GROUPS)}


def _sorted_unique(idx) -> Tuple[int, ...]:
    out = tuple(int(i) for i in idx)
    if any(b <= a for a, b in zip(out, out[1:])):
        raise ValueError(f"index set must be strictly increasing, got {out}")
    if out and out[0] < 1:
        raise ValueError("indices are 1-based")
    return out


@dataclass(frozen=True, order=True)
class FormMonomial:
    """Basis monomial in canonical order; each field is a strictly increasing index tuple."""

    dzeta: Tuple[int, ...] = ()
    dz: Tuple[int, ...] = ()
    dzetabar: Tuple[int, ...] = ()
    dzbar: Tuple[int, ...] = ()
    dt: Tuple[int, ...] = ()

    def __post_init__(self):
        for g in GROUPS:
            object.__setattr__(self, g, _sorted_unique(getattr(self, g)))

    @property
    def degree(self) -> int:
        return sum(len(getattr(self, g)) for g in GROUPS)

    def factors(self) -> Tuple[Tuple[int, int], ...]:
        """Factors as (group rank, index) pairs in canonical order."""
        return tuple((_GROUP_RANK[g], i) for g in GROUPS for i in getattr(self, g))

    @classmethod
    def from_factors(cls, factors: Iterable[Tuple[int, int]]) -> "FormMonomial":
        groups = {g: [] for g in GROUPS}
        for rank, i in factors:
            groups[GROUPS[rank]].append(i)
        return cls(**{g: tuple(v) for g, v in groups.items()})

    def key(self) -> str:
        return "|".join(f"{g}:" + ",".join(map(str, getattr(self, g))) for g in GROUPS)

    @classmethod
    def from_key(cls, key: str) -> "FormMonomial":
        parts = {}
        for chunk in key.split("|"):
            name, _, idx = chunk.partition(":")
            parts[name] = tuple(int(i) for i in idx.split(",") if i)
        return cls(**parts)

    def max_index(self) -> Tuple[int, int]:
        """Largest complex index and largest t index used."""
        return _max_index(self)


@lru_cache(maxsize=None)
def _max_index(m: FormMonomial) -> Tuple[int, int]:
    cplx = max([0] + [i for g in GROUPS[:4] for i in getattr(m, g)])
    return cplx, max((0,) + m.dt)


@lru_cache(maxsize=None)
def monomial_wedge(a: FormMonomial, b: FormMonomial) -> Tuple[int, Optional[FormMonomial]]:
    """Return (sign, monomial) for a ^ b; sign 0 when a factor repeats."""
    fa, fb = a.factors(), b.factors()
    if set(fa) & set(fb):
        return 0, None
    # both lists are sorted, so the sign is the parity of cross inversions
    inversions = sum(1 for x in fa for y in fb if x > y)
    merged = sorted(fa + fb)
    return (-1) ** (inversions % 2), FormMonomial.from_factors(merged)


class PointForm:
    """
    Differential form evaluated at a single point.

    Parameters
    ----------
    terms : mapping FormMonomial -> complex
        Coefficients; zeros are dropped.
    n, l : int
        Complex and real ambient dimensions.
    """

    __slots__ = ("terms", "n", "l")

    def __init__(self, terms: Optional[Mapping[FormMonomial, complex]] = None, n: int = 1, l: int = 0):
        self.n = int(n)
        self.l = int(l)
        clean = {}
        for mono, c in (terms or {}).items():
            cn, ln = mono.max_index()
            if cn > self.n or ln > self.l:
                raise ValueError(f"monomial {mono.key()} exceeds ambient dims (n={n}, l={l})")
            c = complex(c)
            if c != 0:
                clean[mono] = c
        self.terms: Dict[FormMonomial, complex] = clean

    # construction helpers
    @classmethod
    def scalar(cls, c, n, l=0) -> "PointForm":
        return cls({FormMonomial(): c}, n, l)

    @classmethod
    def basis(cls, group: str, index: int, n: int, l: int = 0) -> "PointForm":
        return cls({FormMonomial(**{group: (index,)}): 1.0}, n, l)

    @classmethod
    def one_form(cls, group: str, coeffs, n: int, l: int = 0) -> "PointForm":
        """sum_j coeffs[j] d<group>_{j+1}."""
        return cls({FormMonomial(**{group: (j + 1,)}): c for j, c in enumerate(coeffs)}, n, l)

    def _check(self, other: "PointForm"):
        if (self.n, self.l) != (other.n, other.l):
            raise ValueError(f"dimension mismatch: ({self.n},{self.l}) vs ({other.n},{other.l})")

    def __add__(self, other: "PointForm") -> "PointForm":
        self._check(other)
        out = dict(self.terms)
        for m, c in other.terms.items():
            out[m] = out.get(m, 0) + c
        return PointForm(out, self.n, self.l)

    def __neg__(self) -> "PointForm":
        return PointForm({m: -c for m, c in self.terms.items()}, self.n, self.l)

    def __sub__(self, other: "PointForm") -> "PointForm":
        return self + (-other)

    def __mul__(self, s) -> "PointForm":
        return PointForm({m: c * s for m, c in self.terms.items()}, self.n, self.l)

    __rmul__ = __mul__

    def __xor__(self, other: "PointForm") -> "PointForm":
        return wedge(self, other)

    def __len__(self):
        return len(self.terms)

    def __repr__(self):
        body = ", ".join(f"{m.key()}: {c:.6g}" for m, c in sorted(self.terms.items()))
        return f"PointForm(n={self.n}, l={self.l}, {{{body}}})"

    def coeff(self, mono: FormMonomial) -> complex:
        return self.terms.get(mono, 0j)

    def degrees(self) -> set:
        return {m.degree for m in self.terms}

    def norm(self) -> float:
        return float(np.sqrt(sum(abs(c) ** 2 for c in self.terms.values())))

    def drop(self, *groups: str) -> "PointForm":
        """Remove every monomial containing a factor from ``groups`` (work modulo those differentials)."""
        return PointForm({m: c for m, c in self.terms.items() if not any(getattr(m, g) for g in groups)},
                         self.n, self.l)

    def keep_only(self, **sizes: int) -> "PointForm":
        """Keep monomials whose group sizes equal the given values."""
        return PointForm({m: c for m, c in self.terms.items()
                          if all(len(getattr(m, g)) == k for g, k in sizes.items())}, self.n, self.l)

    def allclose(self, other: "PointForm", atol=1e-12, rtol=1e-12) -> bool:
        self._check(other)
        scale = max(self.norm(), other.norm(), 1.0)
        return (self - other).norm() <= atol + rtol * scale

    def to_record(self) -> str:
        """JSON text record with sorted monomial keys mapped to [re, im]."""
        terms = {m.key(): [c.real, c.imag] for m, c in sorted(self.terms.items())}
        return json.dumps({"n": self.n, "l": self.l, "terms": terms}, sort_keys=True)

    @classmethod
    def from_record(cls, text: str) -> "PointForm":
        rec = json.loads(text)
        terms = {FormMonomial.from_key(k): complex(re, im) for k, (re, im) in rec["terms"].items()}
        return cls(terms, rec["n"], rec["l"])


def wedge(a: PointForm, b: PointForm) -> PointForm:
    """Exterior product with canonical-order sign bookkeeping."""
    a._check(b)
    out: Dict[FormMonomial, complex] = {}
    for ma, ca in a.terms.items():
        for mb, cb in b.terms.items():
            s, m = monomial_wedge(ma, mb)
            if s:
                out[m] = out.get(m, 0) + s * ca * cb
    return PointForm(out, a.n, a.l)


def omega(n: int, variable: str = "zeta", l: int = 0) -> PointForm:
    """Holomorphic volume form d<variable>_1 ^ ... ^ d<variable>_n (variable 'zeta' or 'z')."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if variable not in ("zeta", "z"):
        raise ValueError("variable must be 'zeta' or 'z'")
    group = "dzeta" if variable == "zeta" else "dz"
    return PointForm({FormMonomial(**{group: tuple(range(1, n + 1))}): 1.0}, n, l)


# ----------------------------------------------------------------------------
# jets

_VARS = ("zeta", "zetabar", "z", "zbar", "t")


class JetField:
    """
    Vector field ``eta(zeta, z, t) -> C^n`` with first-derivative jets.

    Parameters
    ----------
    func : callable
        ``func(zeta, z, t)`` with ``zeta, z`` of shape (..., n) and ``t`` of
        shape (..., l); returns shape (..., n).
    n, l : int
        Dimensions.
    h : float
        Central finite-difference step used for jets not supplied analytically.
    jets : dict, optional
        Analytic jets keyed by 'zeta', 'zetabar', 'z', 'zbar', 't'; each maps
        ``(zeta, z, t) -> array (..., n, dim)`` with entry [k, j] = d eta_k / d var_j.
    """

    def __init__(self, func: Callable, n: int, l: int = 0, h: float = 1e-5,
                 jets: Optional[Mapping[str, Callable]] = None):
        self.func = func
        self.n = int(n)
        self.l = int(l)
        self.h = float(h)
        self.jets = dict(jets or {})
        unknown = set(self.jets) - set(_VARS)
        if unknown:
            raise ValueError(f"unknown jet variables {unknown}")

    def with_step(self, h: float, analytic: bool = True) -> "JetField":
        return JetField(self.func, self.n, self.l, h, self.jets if analytic else None)

    def _args(self, zeta, z, t):
        zeta = np.asarray(zeta, dtype=complex)
        z = np.asarray(z, dtype=complex)
        if t is None:
            t = np.zeros(zeta.shape[:-1] + (self.l,))
        t = np.asarray(t, dtype=float)
        return zeta, z, t

    def __call__(self, zeta, z, t=None):
        zeta, z, t = self._args(zeta, z, t)
        return np.asarray(self.func(zeta, z, t), dtype=complex)

    def jet(self, var: str, zeta, z, t=None) -> np.ndarray:
        """Matrix of first derivatives, shape (..., n, dim(var))."""
        if var not in _VARS:
            raise ValueError(f"unknown variable {var!r}")
        zeta, z, t = self._args(zeta, z, t)
        if var in self.jets:
            return np.asarray(self.jets[var](zeta, z, t), dtype=complex)
        h = self.h
        if var == "t":
            cols = []
            for a in range(self.l):
                e = np.zeros(self.l)
                e[a] = h
                cols.append((self.func(zeta, z, t + e) - self.func(zeta, z, t - e)) / (2 * h))
            return np.stack(cols, axis=-1) if cols else np.zeros(zeta.shape[:-1] + (self.n, 0), complex)
        base = "zeta" if var.startswith("zeta") else "z"
        conj = var.endswith("bar")
        cols = []
        for j in range(self.n):
            e = np.zeros(self.n, dtype=complex)
            e[j] = h

            def shifted(step):
                if base == "zeta":
                    return self.func(zeta + step, z, t)
                return self.func(zeta, z + step, t)

            dx = (shifted(e) - shifted(-e)) / (2 * h)
            dy = (shifted(1j * e) - shifted(-1j * e)) / (2 * h)
            # Wirtinger: d/dw = (dx - i dy)/2, d/dwbar = (dx + i dy)/2
            cols.append(0.5 * (dx + 1j * dy) if conj else 0.5 * (dx - 1j * dy))
        return np.stack(cols, axis=-1)


def _check_range(n: int, r: int):
    if not 0 <= r <= n - 1:
        raise ValueError(f"degree r={r} out of range 0..{n - 1}")


def omega_prime_monomials(n: int, l: int, r: int):
    """
    Index layout of omega'_r: list of (J, K, monomial, sign).

    J are 0-based dzbar columns (|J| = r); K are 0-based columns of the
    combined (dzetabar, dt) block (|K| = n-r-1), with columns >= n meaning dt.
    ``sign`` converts the column-ordered product dzbar_J ^ dw_K into
    canonical order.
    """
    _check_range(n, r)
    out = []
    for J in itertools.combinations(range(n), r):
        for K in itertools.combinations(range(n + l), n - r - 1):
            kz = [k for k in K if k < n]
            kt = [k - n for k in K if k >= n]
            sign = (-1) ** ((len(J) * len(kz)) % 2)
            mono = FormMonomial(dzetabar=tuple(k + 1 for k in kz), dzbar=tuple(j + 1 for j in J),
                                dt=tuple(a + 1 for a in kt))
            out.append((J, K, mono, sign))
    return out


def omega_prime_coeffs(eta_val, dzbar_jac, dw_jac, r: int, layout=None):
    """
    Batched coefficients of omega'_r.

    Parameters
    ----------
    eta_val : array (..., n)
    dzbar_jac : array (..., n, n), [k, j] = d eta_k / d zbar_j
    dw_jac : array (..., n, n + l), zetabar columns followed by t columns
    r : int
    layout : list, optional
        Output of :func:`omega_prime_monomials`.

    Returns
    -------
    coeffs : array (..., len(layout))
        Coefficient of each monomial in canonical order.

    Notes
    -----
    Expanding the mixed determinant over the r! (n-r-1)! orderings of the
    chosen columns cancels the factorial prefactor, so each coefficient is a
    single ordinary determinant ``det[eta, A[:, J], B[:, K]]``.
    """
    eta_val = np.asarray(eta_val)
    n = eta_val.shape[-1]
    l = dw_jac.shape[-1] - n
    if layout is None:
        layout = omega_prime_monomials(n, l, r)
    # gather the columns of every monomial's matrix from [eta | A | B] at once
    full = np.concatenate([eta_val[..., :, None], dzbar_jac, dw_jac], axis=-1)
    idx = np.array([[0] + [1 + j for j in J] + [1 + n + k for k in K] for J, K, _, _ in layout], dtype=int)
    mats = np.moveaxis(full[..., :, idx], -3, -2)
    signs = np.array([s for *_, s in layout], dtype=float)
    return np.linalg.det(mats) * signs


def kernel_jets(eta: JetField, zeta, z, t=None):
    """Value, dzbar-jacobian and (dzetabar | dt)-jacobian of ``eta``."""
    val = eta(zeta, z, t)
    a = eta.jet("zbar", zeta, z, t)
    b = eta.jet("zetabar", zeta, z, t)
    if eta.l:
        b = np.concatenate([b, eta.jet("t", zeta, z, t)], axis=-1)
    return val, a, b


def omega_prime_r(eta: JetField, r: int, point) -> PointForm:
    """
    Bidegree-r piece of the Cauchy-Fantappie form at a point.

    Parameters
    ----------
    eta : JetField
    r : int
        Number of dzbar factors, 0 <= r <= n-1.
    point : tuple
        ``(zeta, z)`` or ``(zeta, z, t)``.

    Returns
    -------
    PointForm
        r factors in dzbar and n-r-1 factors in dzetabar/dt.
    """
    n, l = eta.n, eta.l
    _check_range(n, r)
    zeta, z, t = _unpack(point, l)
    layout = omega_prime_monomials(n, l, r)
    val, a, b = kernel_jets(eta, zeta, z, t)
    c = omega_prime_coeffs(val, a, b, r, layout)
    return PointForm({mono: c[p] for p, (_, _, mono, _) in enumerate(layout)}, n, l)


def omega_prime_r_batch(eta: JetField, r: int, zeta, z, t=None):
    """
    Vectorized omega'_r over many points.

    Returns
    -------
    monomials : list of FormMonomial
    coeffs : array (..., len(monomials))
    """
    _check_range(eta.n, r)
    layout = omega_prime_monomials(eta.n, eta.l, r)
    val, a, b = kernel_jets(eta, zeta, z, t)
    return [mono for _, _, mono, _ in layout], omega_prime_coeffs(val, a, b, r, layout)


def omega_prime(eta: JetField, point) -> PointForm:
    """Sum of all bidegree pieces (the dzeta, dz parts of d eta are omitted)."""
    out = PointForm({}, eta.n, eta.l)
    for r in range(eta.n):
        out = out + omega_prime_r(eta, r, point)
    return out


def _unpack(point, l):
    if len(point) == 2:
        zeta, z = point
        t = np.zeros(l)
    else:
        zeta, z, t = point
    return np.asarray(zeta, complex), np.asarray(z, complex), np.asarray(t if t is not None else np.zeros(l), float)


def normalization_defect(eta: JetField, point) -> float:
    """|sum_k eta_k (zeta_k - z_k) - 1|."""
    zeta, z, t = _unpack(point, eta.l)
    return float(abs(np.sum(eta(zeta, z, t) * (zeta - z)) - 1.0))


def _shifted_form(eta, r, zeta, z, t, var, j, step):
    if r < 0 or r > eta.n - 1:
        return PointForm({}, eta.n, eta.l)
    if var == "zeta":
        zeta = zeta.copy()
        zeta[j] += step
    elif var == "z":
        z = z.copy()
        z[j] += step
    else:
        t = t.copy()
        t[j] += step.real
    return omega_prime_r(eta, r, (zeta, z, t))


def _dbar_part(eta, r, zeta, z, t, var, h):
    """sum_j d<var>bar_j ^ d/d<var>bar_j of omega'_r (or d_t when var == 't')."""
    n, l = eta.n, eta.l
    out = PointForm({}, n, l)
    if var == "t":
        for a in range(l):
            d = (_shifted_form(eta, r, zeta, z, t, "t", a, h)
                 - _shifted_form(eta, r, zeta, z, t, "t", a, -h)) * (1 / (2 * h))
            out = out + wedge(PointForm.basis("dt", a + 1, n, l), d)
        return out
    group = "dzetabar" if var == "zeta" else "dzbar"
    for j in range(n):
        dx = (_shifted_form(eta, r, zeta, z, t, var, j, h)
              - _shifted_form(eta, r, zeta, z, t, var, j, -h)) * (1 / (2 * h))
        dy = (_shifted_form(eta, r, zeta, z, t, var, j, 1j * h)
              - _shifted_form(eta, r, zeta, z, t, var, j, -1j * h)) * (1 / (2 * h))
        d = (dx + dy * 1j) * 0.5
        out = out + wedge(PointForm.basis(group, j + 1, n, l), d)
    return out


def cf_identity_form(eta: JetField, r: int, point, h: float) -> PointForm:
    """
    Finite-difference form d_t w'_r + dbar_zeta w'_r + dbar_z w'_{r-1}.

    Derivatives are taken by central differences with step ``h`` (the jets
    of ``eta`` use the same step unless supplied analytically).  The
    result should vanish for kernels normalized against zeta - z.
    """
    n = eta.n
    if not 0 <= r <= n:
        raise ValueError(f"degree r={r} out of range 0..{n}")
    zeta, z, t = _unpack(point, eta.l)
    jet = eta.with_step(h)
    total = _dbar_part(jet, r, zeta, z, t, "t", h) if eta.l else PointForm({}, n, eta.l)
    total = total + _dbar_part(jet, r, zeta, z, t, "zeta", h)
    total = total + _dbar_part(jet, r - 1, zeta, z, t, "z", h)
    return total


def cf_identity_residual(eta: JetField, r: int, point, h: float = 1e-3, tol: float = 1e-8) -> float:
    """
    Euclidean norm of :func:`cf_identity_form` after checking the normalization.

    Raises
    ------
    ValueError
        If ``sum eta_k (zeta_k - z_k) != 1`` beyond ``tol`` at the point.
    """
    defect = normalization_defect(eta, point)
    if defect > tol:
        raise ValueError(f"kernel not normalized at point: defect {defect:.3e} > {tol:.1e}")
    return cf_identity_form(eta, r, point, h).norm()


# ----------------------------------------------------------------------------
# standard kernels

def bochner_martinelli(n: int, analytic: bool = True, h: float = 1e-5) -> JetField:
    """eta = conj(zeta - z) / |zeta - z|^2 with analytic jets."""

    def func(zeta, z, t):
        w = zeta - z
        return np.conj(w) / np.sum(np.abs(w) ** 2, axis=-1, keepdims=True)

    def d_zetabar(zeta, z, t):
        w = zeta - z
        s = np.sum(np.abs(w) ** 2, axis=-1)[..., None, None]
        eye = np.eye(n)
        return eye / s - np.conj(w)[..., :, None] * w[..., None, :] / s ** 2

    def d_zeta(zeta, z, t):
        w = zeta - z
        s = np.sum(np.abs(w) ** 2, axis=-1)[..., None, None]
        return -np.conj(w)[..., :, None] * np.conj(w)[..., None, :] / s ** 2

    jets = None
    if analytic:
        jets = {"zetabar": d_zetabar, "zbar": lambda *a: -d_zetabar(*a),
                "zeta": d_zeta, "z": lambda *a: -d_zeta(*a)}
    return JetField(func, n, 0, h, jets)


def interpolate_kernels(etas, h: float = 1e-5) -> JetField:
    """
    Affine combination of kernels over a simplex.

    With k kernels the result depends on t in R^(k-1) through barycentric
    weights (1 - sum t, t_1, ..., t_{k-1}).
    """
    etas = list(etas)
    n = etas[0].n
    l = len(etas) - 1

    def func(zeta, z, t):
        w0 = 1.0 - np.sum(t, axis=-1, keepdims=True)
        out = w0 * etas[0](zeta, z)
        for a, e in enumerate(etas[1:]):
            out = out + t[..., a:a + 1] * e(zeta, z)
        return out

    def weights(t):
        return [1.0 - np.sum(t, axis=-1)] + [t[..., a] for a in range(l)]

    def combo(var):
        def jet(zeta, z, t):
            ws = weights(t)
            return sum(w[..., None, None] * e.jet(var, zeta, z) for w, e in zip(ws, etas))
        return jet

    def d_t(zeta, z, t):
        base = etas[0](zeta, z)
        return np.stack([e(zeta, z) - base for e in etas[1:]], axis=-1)

    jets = {v: combo(v) for v in ("zeta", "zetabar", "z", "zbar")}
    jets["t"] = d_t
    return JetField(func, n, l, h, jets)
