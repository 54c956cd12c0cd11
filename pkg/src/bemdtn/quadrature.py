"""Quadrature over triangles and triangle pairs.

Regular (disjoint) pairs use tensor products of symmetric triangle rules.
Pairs that share a vertex, an edge, or coincide use the Sauter--Schwab
relative-coordinate transformations, which map the 4-d integral onto the unit
hypercube with a Jacobian that cancels the ``1/r`` singularity, so the kernel
is never evaluated at ``x == y``.

Reference triangle: ``{(x1, x2) : 0 <= x2 <= x1 <= 1}`` mapped to a physical
triangle ``(P0, P1, P2)`` by ``P0 + x1 (P1 - P0) + x2 (P2 - P1)``.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import SingularEvaluation

FOUR_PI = 4.0 * np.pi


@dataclass(frozen=True)
class TriangleRule:
    """Barycentric nodes and weights (summing to one) on a triangle."""

    nodes: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.weights)


def _sym_rule(groups):
    nodes, weights = [], []
    for w, bary in groups:
        for perm in sorted(set(itertools.permutations(bary))):
            nodes.append(perm)
            weights.append(w)
    return TriangleRule(np.array(nodes), np.array(weights))


# Dunavant rules; every node is strictly interior.
_DUNAVANT = {
    1: [(1.0, (1 / 3, 1 / 3, 1 / 3))],
    2: [(1 / 3, (2 / 3, 1 / 6, 1 / 6))],
    4: [
        (0.223381589678011, (0.108103018168070, 0.445948490915965, 0.445948490915965)),
        (0.109951743655322, (0.816847572980459, 0.091576213509771, 0.091576213509771)),
    ],
    5: [
        (0.225, (1 / 3, 1 / 3, 1 / 3)),
        (0.132394152788506, (0.059715871789770, 0.470142064105115, 0.470142064105115)),
        (0.125939180544827, (0.797426985353087, 0.101286507323456, 0.101286507323456)),
    ],
}


def gauss_legendre_01(n):
    x, w = np.polynomial.legendre.leggauss(n)
    return (x + 1) / 2, w / 2


def collapsed_gauss_rule(n) -> TriangleRule:
    """Duffy-collapsed Gauss product rule with ``n * n`` interior nodes."""
    x, w = gauss_legendre_01(n)
    xi, eta = np.meshgrid(x, x, indexing="ij")
    wi = np.outer(w, w) * xi * 2.0
    x1, x2 = xi.ravel(), (xi * eta).ravel()
    return TriangleRule(ref_to_barycentric(np.stack([x1, x2], 1)), wi.ravel())


@lru_cache(maxsize=None)
def triangle_rule(degree=4) -> TriangleRule:
    """Symmetric rule exact for polynomials of the given degree."""
    if degree <= 0:
        raise ValueError("degree must be positive")
    for d in sorted(_DUNAVANT):
        if degree <= d:
            r = _sym_rule(_DUNAVANT[d])
            return TriangleRule(r.nodes, r.weights / r.weights.sum())
    return collapsed_gauss_rule((degree + 2) // 2)


def ref_to_barycentric(xhat):
    """Barycentric coordinates ``(1 - x1, x1 - x2, x2)`` of reference points."""
    x1, x2 = xhat[..., 0], xhat[..., 1]
    return np.stack([1.0 - x1, x1 - x2, x2], axis=-1)


class PairClass(enum.IntEnum):
    DISJOINT = 0
    SHARED_VERTEX = 1
    SHARED_EDGE = 2
    COINCIDENT = 3


def classify_pair(tri_a, tri_b) -> PairClass:
    return PairClass(len(set(map(int, tri_a)) & set(map(int, tri_b))))


def shared_orderings(tri_a, tri_b):
    """Corner orderings that put shared vertices first in matching positions.

    Returns ``(pa, pb)``: local corner indices of ``tri_a`` / ``tri_b`` in the
    order required by the Sauter--Schwab parametrizations.
    """
    a, b = [int(x) for x in tri_a], [int(x) for x in tri_b]
    shared = [v for v in a if v in b]
    if len(shared) == 3:
        return [0, 1, 2], [0, 1, 2]
    pa = [a.index(v) for v in shared] + [k for k in range(3) if a[k] not in shared]
    pb = [b.index(v) for v in shared] + [k for k in range(3) if b[k] not in shared]
    return pa, pb


@lru_cache(maxsize=None)
def sauter_schwab_rule(pair_class: PairClass, order=4):
    """Reference points ``(xhat, yhat, w)`` for a singular pair class.

    ``w`` includes the transformation Jacobian; integrating 1 gives 1/4, the
    squared area of the reference triangle.
    """
    pair_class = PairClass(pair_class)
    x, w = gauss_legendre_01(order)
    grid = np.array(list(itertools.product(x, repeat=4)))
    gw = np.prod(np.array(list(itertools.product(w, repeat=4))), axis=1)
    xi, e1, e2, e3 = grid.T
    if pair_class == PairClass.COINCIDENT:
        jac = xi**3 * e1**2 * e2
        maps = [
            ((xi, xi * (1 - e1 + e1 * e2)), (xi * (1 - e1 * e2 * e3), xi * (1 - e1)), jac),
            ((xi * (1 - e1 * e2 * e3), xi * (1 - e1)), (xi, xi * (1 - e1 + e1 * e2)), jac),
            ((xi, xi * e1 * (1 - e2 + e2 * e3)), (xi * (1 - e1 * e2), xi * e1 * (1 - e2)), jac),
            ((xi * (1 - e1 * e2), xi * e1 * (1 - e2)), (xi, xi * e1 * (1 - e2 + e2 * e3)), jac),
            ((xi * (1 - e1 * e2 * e3), xi * e1 * (1 - e2 * e3)), (xi, xi * e1 * (1 - e2)), jac),
            ((xi, xi * e1 * (1 - e2)), (xi * (1 - e1 * e2 * e3), xi * e1 * (1 - e2 * e3)), jac),
        ]
    elif pair_class == PairClass.SHARED_EDGE:
        j0 = xi**3 * e1**2
        j1 = j0 * e2
        maps = [
            ((xi, xi * e1 * e3), (xi * (1 - e1 * e2), xi * e1 * (1 - e2)), j0),
            ((xi, xi * e1), (xi * (1 - e1 * e2 * e3), xi * e1 * e2 * (1 - e3)), j1),
            ((xi * (1 - e1 * e2), xi * e1 * (1 - e2)), (xi, xi * e1 * e2 * e3), j1),
            ((xi * (1 - e1 * e2 * e3), xi * e1 * e2 * (1 - e3)), (xi, xi * e1), j1),
            ((xi * (1 - e1 * e2 * e3), xi * e1 * (1 - e2 * e3)), (xi, xi * e1 * e2), j1),
        ]
    elif pair_class == PairClass.SHARED_VERTEX:
        jac = xi**3 * e2
        maps = [
            ((xi, xi * e1), (xi * e2, xi * e2 * e3), jac),
            ((xi * e2, xi * e2 * e3), (xi, xi * e1), jac),
        ]
    else:
        raise ValueError("disjoint pairs use the regular tensor rule")
    xs = np.concatenate([np.stack(m[0], 1) for m in maps])
    ys = np.concatenate([np.stack(m[1], 1) for m in maps])
    ws = np.concatenate([gw * m[2] for m in maps])
    for arr in (xs, ys, ws):
        arr.setflags(write=False)
    return xs, ys, ws


class Kernel:
    """Kernel ``p(x, y, n_x, n_y)`` written in terms of ``d = x - y`` and ``r = |d|``.

    ``fn(d, r, nx, ny)`` operates on stacked arrays. The ``1/4pi`` factor is
    applied by the pair integrators, not here.
    """

    def __init__(self, fn, name="kernel", eps=0.0):
        self.fn = fn
        self.name = name
        self.eps = float(eps)

    def __repr__(self):
        return f"Kernel({self.name!r}, eps={self.eps:g})"

    def __call__(self, x, y, nx, ny):
        d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
        r = np.linalg.norm(d, axis=-1)
        if np.any(r == 0):
            raise SingularEvaluation(f"{self.name} kernel evaluated at coincident points")
        return self.fn(d, r + self.eps, np.asarray(nx, dtype=float), np.asarray(ny, dtype=float))


def regularized_kernel(p: Kernel, eps: float) -> Kernel:
    """Same kernel with every distance ``r`` replaced by ``r + eps``."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    return Kernel(p.fn, name=p.name, eps=p.eps + eps)


def _tri_geometry(vertices, tri):
    p = np.asarray(vertices, dtype=float)[np.asarray(tri)]
    cr = np.cross(p[1] - p[0], p[2] - p[0])
    area2 = np.linalg.norm(cr)
    if area2 == 0:
        raise ValueError("degenerate triangle")
    return p, cr / area2, area2


def pair_block(kernel: Kernel, vertices, tri_a, tri_b, order=4, regular_degree=4):
    """All nine hat-function pair integrals of ``kernel`` over ``tri_a x tri_b``.

    Entry ``[i, j]`` is ``(1/4pi) ∬ p(x, y) phi_i(x) phi_j(y)`` with ``phi_i`` the
    hat at local corner ``i`` of ``tri_a`` and ``phi_j`` at corner ``j`` of ``tri_b``.
    """
    pa_pts, na, a2 = _tri_geometry(vertices, tri_a)
    pb_pts, nb, b2 = _tri_geometry(vertices, tri_b)
    cls = classify_pair(tri_a, tri_b)
    out = np.zeros((3, 3))
    if cls == PairClass.DISJOINT:
        rule = triangle_rule(regular_degree)
        xa, xb = rule.nodes @ pa_pts, rule.nodes @ pb_pts
        q = len(rule)
        vals = kernel(
            np.repeat(xa, q, axis=0), np.tile(xb, (q, 1)), np.broadcast_to(na, (q * q, 3)), np.broadcast_to(nb, (q * q, 3))
        ).reshape(q, q)
        wv = rule.weights[:, None] * rule.weights[None, :] * vals * (a2 / 2) * (b2 / 2)
        out = rule.nodes.T @ wv @ rule.nodes
        return out / FOUR_PI
    perm_a, perm_b = shared_orderings(tri_a, tri_b)
    xh, yh, w = sauter_schwab_rule(cls, order)
    qa, qb = pa_pts[perm_a], pb_pts[perm_b]
    x = qa[0] + xh[:, :1] * (qa[1] - qa[0]) + xh[:, 1:] * (qa[2] - qa[1])
    y = qb[0] + yh[:, :1] * (qb[1] - qb[0]) + yh[:, 1:] * (qb[2] - qb[1])
    n = len(w)
    vals = kernel(x, y, np.broadcast_to(na, (n, 3)), np.broadcast_to(nb, (n, 3))) * w * a2 * b2
    ba, bb = ref_to_barycentric(xh), ref_to_barycentric(yh)
    blk = ba.T @ (vals[:, None] * bb)
    out[np.ix_(perm_a, perm_b)] = blk
    return out / FOUR_PI


def pair_integral(kernel: Kernel, vertices, tri_a, tri_b, basis_i, basis_j, order=4, regular_degree=4):
    """``(1/4pi) ∬ p(x,y) phi_i(x) phi_j(y)`` for local corners ``basis_i`` of A and ``basis_j`` of B."""
    if order < 1:
        raise ValueError("order must be >= 1")
    return float(pair_block(kernel, vertices, tri_a, tri_b, order, regular_degree)[basis_i, basis_j])
