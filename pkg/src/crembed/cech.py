"""
Cech globalization of local dbar_M solvers.

The algorithms (coboundary, partition contraction, south-west and
north-east diagram searches, the coboundary solver ``q2`` and the global
solvers ``R^1``, ``R^2`` with their composition into a homotopy formula)
only use the interface of a :class:`SectionSpace`:

* ``dbar(v, k)``: the vertical differential on (0,k) data;
* ``mask(I, level, k)``: support of (0,k) data over the overlap ``U_I`` at a cover level;
* ``local_solve(h, k, I, level)``: a right inverse of dbar on closed data over ``U_I``;
* ``global_solve(h, k)``: a right inverse of dbar on exact global data;
* ``partition(l, k)``: partition-of-unity weights subordinate to the innermost level.

Holomorphic extension is the identity in the finite model, so the
uniqueness of extension holds structurally.

:class:`MockSections` realises the interface on simplicial cochains of a
Freudenthal-triangulated cube (optionally with a hollow centre so that
H^2 != 0 while H^1 = 0): "(0,k) forms" are k-cochains, dbar is the
simplicial coboundary and local solvers are least-squares right inverses.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

Index = Tuple[int, ...]
LEVELS = 6


class CechError(RuntimeError):
    """A diagram-search stage left a residual beyond tolerance."""


# ----------------------------------------------------------------------------
# finite model

def freudenthal_complex(size: int, hollow: bool = True):
    """
    Vertices and simplices of the Freudenthal triangulation of [0, size]^3.

    Returns
    -------
    coords : array (V, 3)
    simplices : list of lists
        ``simplices[k]`` holds sorted vertex tuples of the k-simplices.
    """
    pts = list(itertools.product(range(size + 1), repeat=3))
    index = {p: i for i, p in enumerate(pts)}
    tets = set()
    for base in itertools.product(range(size), repeat=3):
        for perm in itertools.permutations(range(3)):
            v = list(base)
            chain = [index[tuple(v)]]
            for axis in perm:
                v[axis] += 1
                chain.append(index[tuple(v)])
            tets.add(tuple(sorted(chain)))
    if hollow:
        mid = index[(size // 2,) * 3]
        tets = {t for t in tets if mid not in t}
    simplices = [set() for _ in range(4)]
    for t in tets:
        for k in range(4):
            simplices[k].update(itertools.combinations(t, k + 1))
    return np.array(pts, float), [sorted(s) for s in simplices]


def coboundary_matrix(lower: Sequence[Index], upper: Sequence[Index]) -> np.ndarray:
    """Simplicial coboundary from k-cochains to (k+1)-cochains."""
    pos = {s: i for i, s in enumerate(lower)}
    D = np.zeros((len(upper), len(lower)))
    for r, s in enumerate(upper):
        for j in range(len(s)):
            D[r, pos[s[:j] + s[j + 1:]]] += (-1) ** j
    return D


class MockSections:
    """
    Finite-dimensional section space over a triangulated cube.

    Parameters
    ----------
    size : int
        Grid cells per axis.
    centers : array (N, 3)
        Cover centers.
    radius : float
        Outer radius (level 1); level k has radius ``radius * shrink^(k-1)``.
    shrink : float
    hollow : bool
        Remove the star of the central vertex (H^2 = Z, H^1 = 0).
    """

    def __init__(self, size: int = 4, centers=None, radius: float = 3.0, shrink: float = 0.93,
                 hollow: bool = True):
        self.coords, self.simplices = freudenthal_complex(size, hollow)
        if centers is None:
            lo, hi = 0.75, size - 0.75
            centers = np.array(list(itertools.product([lo, hi], repeat=3)))
        self.centers = np.asarray(centers, float)
        self.N = len(self.centers)
        self.radii = [radius * shrink ** k for k in range(LEVELS)]
        self.D = [coboundary_matrix(self.simplices[k], self.simplices[k + 1]) for k in range(3)]
        # vertex membership per level and ball
        dist = np.linalg.norm(self.coords[:, None, :] - self.centers[None], axis=-1)
        self._vin = [dist <= r + 1e-9 for r in self.radii]
        self._members = {}
        for level in range(1, LEVELS + 1):
            for k in range(4):
                S = np.array(self.simplices[k])
                self._members[level, k] = np.all(self._vin[level - 1][S], axis=1)
        for k in range(4):
            if not np.all(self._members[LEVELS, k].any(axis=1)):
                raise ValueError("innermost cover level does not cover the complex")
        self._weights = {}
        for k in range(4):
            S = np.array(self.simplices[k])
            bary = self.coords[S].mean(axis=1)
            d = np.linalg.norm(bary[:, None, :] - self.centers[None], axis=-1) / self.radii[-1]
            w = np.where(self._members[LEVELS, k], np.cos(0.5 * np.pi * np.clip(d, 0, 1)) + 1e-3, 0.0)
            self._weights[k] = w / w.sum(axis=1, keepdims=True)
        self._solvers: Dict = {}

    # interface -----------------------------------------------------------------
    def dim(self, k: int) -> int:
        return len(self.simplices[k]) if 0 <= k <= 3 else 0

    def zero(self, k: int) -> np.ndarray:
        return np.zeros(self.dim(k))

    def dbar(self, v, k: int) -> np.ndarray:
        if k >= 3:
            return np.zeros(0)
        return self.D[k] @ v

    def mask(self, I: Index, level: int, k: int) -> np.ndarray:
        m = np.ones(self.dim(k), bool)
        for i in I:
            m &= self._members[level, k][:, i]
        return m

    def nonempty(self, I: Index, level: int) -> bool:
        return bool(self.mask(I, level, 0).any())

    def partition(self, l: int, k: int) -> np.ndarray:
        return self._weights[k][:, l]

    def _solver(self, key, rows, cols, k):
        if key not in self._solvers:
            A = self.D[k - 1][np.ix_(rows, cols)]
            self._solvers[key] = np.linalg.pinv(A, rcond=1e-10)
        return self._solvers[key]

    def local_solve(self, h, k: int, I: Index, level: int, tol: float = 1e-8) -> np.ndarray:
        """Least-squares u on U_I (level) with dbar u = h there; raises if h is not exact there."""
        rows, cols = self.mask(I, level, k), self.mask(I, level, k - 1)
        S = self._solver(("loc", I, level, k), rows, cols, k)
        u = np.zeros(self.dim(k - 1))
        u[cols] = S @ h[rows]
        res = np.linalg.norm(self.D[k - 1][np.ix_(rows, cols)] @ u[cols] - h[rows])
        if res > tol * max(1.0, np.linalg.norm(h[rows])):
            raise CechError(f"local solve on {I} (level {level}, degree {k}) left residual {res:.2e}")
        return u

    def global_solve(self, h, k: int, tol: float = 1e-8) -> np.ndarray:
        S = self._solver(("glob", k), np.ones(self.dim(k), bool), np.ones(self.dim(k - 1), bool), k)
        u = S @ h
        res = np.linalg.norm(self.D[k - 1] @ u - h)
        if res > tol * max(1.0, np.linalg.norm(h)):
            raise CechError(f"global solve in degree {k} left residual {res:.2e} (data not exact)")
        return u

    def norm(self, v) -> float:
        return float(np.max(np.abs(v), initial=0.0))

    def betti(self) -> List[int]:
        """Ranks of the simplicial cohomology (for fixture sanity)."""
        ranks = [np.linalg.matrix_rank(D) for D in self.D]
        dims = [self.dim(k) for k in range(4)]
        return [dims[k] - (ranks[k] if k < 3 else 0) - (ranks[k - 1] if k > 0 else 0) for k in range(4)]


# ----------------------------------------------------------------------------
# cochains

def _sort_index(I) -> Tuple[int, Optional[Index]]:
    I = tuple(I)
    if len(set(I)) != len(I):
        return 0, None
    perm = sorted(range(len(I)), key=lambda a: I[a])
    sign, seen = 1, [False] * len(I)
    for a in range(len(I)):
        if not seen[a]:
            b, length = a, 0
            while not seen[b]:
                seen[b] = True
                b = perm[b]
                length += 1
            sign *= (-1) ** (length - 1)
    return sign, tuple(sorted(I))


@dataclass
class Cochain:
    """
    Cech j-cochain of (0,k) data at a cover level.

    Values are stored on increasing index tuples; ``get`` applies the
    antisymmetry for other orderings.  Missing overlaps are absent.
    """

    j: int
    k: int
    level: int
    values: Dict[Index, np.ndarray] = field(default_factory=dict)

    def get(self, I, space) -> np.ndarray:
        s, Is = _sort_index(I)
        if not s or Is not in self.values:
            return space.zero(self.k)
        return s * self.values[Is]

    def map(self, f) -> "Cochain":
        return Cochain(self.j, self.k, self.level, {I: f(v) for I, v in self.values.items()})

    def combine(self, other: "Cochain", a=1.0, b=1.0) -> "Cochain":
        keys = set(self.values) | set(other.values)
        z = next(iter(self.values.values()), next(iter(other.values.values()), None))
        zero = np.zeros_like(z) if z is not None else 0
        vals = {I: a * self.values.get(I, zero) + b * other.values.get(I, zero) for I in keys}
        return Cochain(self.j, self.k, max(self.level, other.level), vals)

    def restrict(self, space, level: int) -> "Cochain":
        vals = {}
        for I, v in self.values.items():
            m = space.mask(I, level, self.k)
            if m.any():
                vals[I] = np.where(m, v, 0.0)
        return Cochain(self.j, self.k, level, vals)

    def max_abs(self) -> float:
        return max((float(np.max(np.abs(v), initial=0)) for v in self.values.values()), default=0.0)


def overlaps(space, j: int, level: int) -> List[Index]:
    return [I for I in itertools.combinations(range(space.N), j + 1) if space.nonempty(I, level)]


def rho(c: Cochain, space, level: Optional[int] = None) -> Cochain:
    """Cech coboundary rho(f)_{i_0..i_{j+1}} = sum (-1)^a f_{..^i_a..}, restricted to the overlap."""
    level = c.level if level is None else level
    vals = {}
    for I in overlaps(space, c.j + 1, level):
        m = space.mask(I, level, c.k)
        acc = space.zero(c.k)
        for a in range(len(I)):
            acc = acc + (-1) ** a * c.get(I[:a] + I[a + 1:], space)
        vals[I] = np.where(m, acc, 0.0)
    return Cochain(c.j + 1, c.k, level, vals)


def chi(c: Cochain, space) -> Cochain:
    """Partition contraction chi(a)_I = sum_{l not in I} phi_l a_{(l, I)}."""
    if c.j < 1:
        raise ValueError("chi lowers the Cech degree; need j >= 1")
    vals = {}
    for I in overlaps(space, c.j - 1, c.level):
        m = space.mask(I, c.level, c.k)
        acc = space.zero(c.k)
        for l in range(space.N):
            if l in I:
                continue
            acc = acc + space.partition(l, c.k) * c.get((l,) + I, space)
        vals[I] = np.where(m, acc, 0.0)
    return Cochain(c.j - 1, c.k, c.level, vals)


def dbar(c: Cochain, space) -> Cochain:
    vals = {}
    for I, v in c.values.items():
        vals[I] = np.where(space.mask(I, c.level, c.k + 1), space.dbar(v, c.k), 0.0)
    return Cochain(c.j, c.k + 1, c.level, vals)


def glue(c: Cochain, space, tol: float = 1e-8) -> np.ndarray:
    """Global datum from a 0-cochain whose coboundary vanishes."""
    if c.j != 0:
        raise ValueError("only 0-cochains glue")
    out = np.zeros(space.dim(c.k))
    seen = np.zeros(space.dim(c.k), bool)
    for I, v in sorted(c.values.items()):
        m = space.mask(I, c.level, c.k)
        clash = m & seen
        if clash.any() and np.max(np.abs(out[clash] - v[clash])) > tol * max(1.0, np.max(np.abs(v))):
            raise CechError("0-cochain does not glue: entries disagree on an overlap")
        out = np.where(m & ~seen, v, out)
        seen |= m
    if not seen.all():
        raise CechError("0-cochain does not cover the complex")
    return out


def localize(v, k: int, space, level: int) -> Cochain:
    """The 0-cochain {v restricted to U_i}."""
    return Cochain(0, k, level, {(i,): np.where(space.mask((i,), level, k), v, 0.0) for i in range(space.N)
                                 if space.nonempty((i,), level)})


def local_solve_cochain(c: Cochain, space, level: int) -> Cochain:
    vals = {I: space.local_solve(v, c.k, I, level) for I, v in c.values.items() if space.nonempty(I, level)}
    return Cochain(c.j, c.k - 1, level, vals)


# ----------------------------------------------------------------------------
# diagram searches

def sw_search(alpha: Cochain, space) -> np.ndarray:
    """
    South-west search for a rho-closed 2-cochain of CR sections.

    The 0-cochain dbar chi dbar chi (alpha) has vanishing coboundary and is
    glued into a global dbar-closed (0,2) datum.
    """
    if alpha.j != 2 or alpha.k != 0:
        raise ValueError("expected a 2-cochain of functions")
    step = chi(dbar(chi(alpha, space), space), space)
    return glue(dbar(step, space), space)


def sw_potential(alpha: Cochain, beta: Cochain, space) -> np.ndarray:
    """g = chi(dbar chi(alpha)) + dbar chi(beta - chi(alpha)) glued; dbar g = sw_search(alpha) when rho(beta) = alpha."""
    a = chi(dbar(chi(alpha, space), space), space)
    b = dbar(chi(beta.combine(chi(alpha, space), 1.0, -1.0), space), space)
    return glue(a.combine(b), space)


def q2(alpha: Cochain, space, inner_level: Optional[int] = None) -> Cochain:
    """
    1-cochain of CR sections with rho(q2(alpha)) = alpha on the inner cover.

    Built as rho{f_i} + chi(alpha) with f_i a local solution of
    dbar f_i = [Q(h) - chi(dbar chi(alpha))]_i and h = sw_search(alpha).
    """
    inner = alpha.level + 1 if inner_level is None else inner_level
    h = sw_search(alpha, space)
    Qh = space.global_solve(h, 2)
    data = localize(Qh, 1, space, alpha.level).combine(chi(dbar(chi(alpha, space), space), space), 1.0, -1.0)
    f = local_solve_cochain(data.restrict(space, inner), space, inner)
    out = rho(f, space, inner).combine(chi(alpha, space).restrict(space, inner))
    return out


def ne_search(h, space, g=None, levels=(1, 2, 3, 4)):
    """
    North-east search for a (0,2) datum h = dbar g.

    Returns
    -------
    alpha : Cochain
        Cocycle of CR sections {h_ij - h_ik + h_jk}.
    beta : Cochain or None
        With rho(beta) = alpha, built from ``g`` when supplied.
    parts : dict
        The intermediate cochains h_i and h_ij.
    """
    l1, l2, l3, l4 = levels
    hi = local_solve_cochain(localize(h, 2, space, l1).restrict(space, l2), space, l2)
    # h_ij solves dbar h_ij = h_i - h_j = -rho(h_.)_ij
    diff = rho(hi, space, l3).map(lambda v: -v)
    hij = local_solve_cochain(diff, space, l3)
    alpha = rho(hij, space, l4)
    beta = None
    if g is not None:
        src = hi.combine(localize(g, 1, space, l2), 1.0, -1.0).restrict(space, l3)
        f = local_solve_cochain(src, space, l3)
        beta = hij.combine(rho(f, space, l3)).restrict(space, l4)
    return alpha, beta, {"h_i": hi, "h_ij": hij}


def global_solve_2(h, space) -> np.ndarray:
    """
    R^2: a global (0,1) datum g with dbar g = h for exact (0,2) data.

    g_i = h_i + dbar chi(h_ij - gamma_ij) on the innermost level, where
    gamma = q2(alpha) corrects the cocycle alpha = rho{h_ij}.
    """
    alpha, _, parts = ne_search(h, space)
    gamma = q2(alpha, space, inner_level=5).restrict(space, LEVELS)
    hij = parts["h_ij"].restrict(space, LEVELS)
    corr = dbar(chi(hij.combine(gamma, 1.0, -1.0), space), space)
    gi = parts["h_i"].restrict(space, LEVELS).combine(corr)
    return glue(gi, space)


def global_solve_1(h, space) -> np.ndarray:
    """
    R^1: a global function g with dbar g = h for exact (0,1) data.

    h_i solves dbar h_i = h locally, alpha_ij = h_i - h_j is a cocycle of
    CR sections, gamma = chi(alpha) - Q(dbar chi(alpha)) satisfies
    rho(gamma) = alpha, and g_i = h_i + gamma_i glues.
    """
    hi = local_solve_cochain(localize(h, 1, space, 1).restrict(space, 2), space, 2)
    alpha = rho(hi, space, 3).map(lambda v: -v)
    ca = chi(alpha, space)
    Q = space.global_solve(glue(dbar(ca, space), space), 1)
    gamma = ca.combine(localize(Q, 0, space, ca.level), 1.0, -1.0)
    gi = hi.restrict(space, LEVELS).combine(gamma.restrict(space, LEVELS))
    return glue(gi, space)


def global_solve_r(h, r: int, space) -> np.ndarray:
    if r == 1:
        return global_solve_1(h, space)
    if r == 2:
        return global_solve_2(h, space)
    raise ValueError("r must be 1 or 2")


def homotopy(h, space):
    """
    P(h) = R^1(h - R^2(dbar h)) and Q(dbar h) = R^2(dbar h), so that h = dbar P(h) + Q(dbar h).
    """
    dh = space.dbar(h, 1)
    Qdh = global_solve_2(dh, space)
    P = global_solve_1(h - Qdh, space)
    return P, Qdh
