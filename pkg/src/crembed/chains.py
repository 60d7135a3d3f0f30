"""
Boundary combinatorics of corner-by-simplex chains for a cover by balls.

A cell ``U_I x [v_0, ..., v_s]`` pairs an ordered index tuple ``I`` (the
corner where the balls in ``I`` meet the tube face) with an oriented simplex
whose vertices are kernel slots: ``"P"`` for the concave barrier and integers
for the convex barriers of the balls.  Reordering either part changes the
sign by the permutation parity, so cells are stored in sorted form with an
integer coefficient.

Boundary rules:

* corners: ``b U_I = sum_{k not in I} U_(I, k)``;
* simplices: ``b [v_0..v_s] = sum_j (-1)^j [v_0..^v_j..v_s]``;
* products (simplex frame first): ``b(U x S) = (-1)^dim(S) bU x S + U x bS``.
"""

from __future__ import annotations

import itertools
from typing import Dict, Iterable, Sequence, Tuple

Vertex = object
Cell = Tuple[Tuple[int, ...], Tuple[Vertex, ...]]
Chain = Dict[Cell, int]

CONCAVE = "P"


def _vkey(v):
    # the concave slot sorts before every ball index
    return (0, 0) if v == CONCAVE else (1, v)


def _sort_sign(seq, key=lambda v: v):
    seq = list(seq)
    if len(set(map(key, seq))) != len(seq):
        return 0, None
    sign = 1
    for i in range(len(seq)):
        for j in range(len(seq) - 1 - i):
            if key(seq[j]) > key(seq[j + 1]):
                seq[j], seq[j + 1] = seq[j + 1], seq[j]
                sign = -sign
    return sign, tuple(seq)


def cell(I: Sequence[int], verts: Sequence[Vertex]) -> Tuple[int, Cell]:
    """Canonical (sign, cell) for ordered corner indices and ordered simplex vertices."""
    s1, Ic = _sort_sign(I)
    s2, Vc = _sort_sign(verts, _vkey)
    if not s1 or not s2:
        return 0, None
    return s1 * s2, (Ic, Vc)


def add(chain: Chain, c: Cell, coef: int):
    if c is None or coef == 0:
        return
    v = chain.get(c, 0) + coef
    if v:
        chain[c] = v
    else:
        chain.pop(c, None)


def chain_from(terms: Iterable[Tuple[int, Sequence[int], Sequence[Vertex]]]) -> Chain:
    out: Chain = {}
    for coef, I, V in terms:
        s, c = cell(I, V)
        add(out, c, coef * s)
    return out


def boundary_cell(c: Cell, J: Sequence[int]) -> Chain:
    """Boundary of one cell inside the cover with index set J."""
    I, V = c
    dim_s = len(V) - 1
    out: Chain = {}
    for k in J:
        if k in I:
            continue
        s, cc = cell(I + (k,), V)
        add(out, cc, (-1) ** dim_s * s)
    if dim_s > 0:
        for j in range(len(V)):
            s, cc = cell(I, V[:j] + V[j + 1:])
            add(out, cc, (-1) ** j * s)
    return out


def boundary(chain: Chain, J: Sequence[int]) -> Chain:
    out: Chain = {}
    for c, coef in chain.items():
        for cc, v in boundary_cell(c, J).items():
            add(out, cc, coef * v)
    return out


def component_chain(I: Sequence[int]) -> Chain:
    """C_I = U_I x Delta_I with the simplex [P, i_1, ..., i_s]."""
    return chain_from([(1, tuple(I), (CONCAVE,) + tuple(I))])


def corner_chain(J: Sequence[int]) -> Chain:
    """C = sum over nonempty I in J of C_I."""
    out: Chain = {}
    for s in range(1, len(J) + 1):
        for I in itertools.combinations(J, s):
            for c, v in component_chain(I).items():
                add(out, c, v)
    return out


def enumerate_cells(J: Sequence[int]) -> Iterable[Cell]:
    """Every canonical cell U_I x S with nonempty I in J and S a nonempty subset of {P} u J."""
    slots = [CONCAVE] + list(J)
    for s in range(1, len(J) + 1):
        for I in itertools.combinations(J, s):
            for k in range(1, len(slots) + 1):
                for V in itertools.combinations(slots, k):
                    yield cell(I, V)[1]
