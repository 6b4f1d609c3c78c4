"""Zonotope and simplex primitives.

Zonotopes are stored as a center vector ``c`` (shape ``(d,)``) and a generator
matrix ``G`` (shape ``(d, g)``, one generator per column), describing the set
``{c + G b : b in [-1, 1]^g}``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class GeometryError(ValueError):
    """Raised on dimension mismatches and degenerate inputs."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Zonotope:
    center: np.ndarray
    generators: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(-1)
        G = np.asarray(self.generators, dtype=float)
        if G.size == 0:
            G = np.zeros((c.shape[0], 0))
        if G.ndim == 1:
            G = G.reshape(-1, 1)
        if G.ndim != 2 or G.shape[0] != c.shape[0]:
            raise GeometryError(
                f"generator rows {G.shape} do not match center dimension {c.shape[0]}"
            )
        object.__setattr__(self, "center", _frozen(c))
        object.__setattr__(self, "generators", _frozen(G))

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    @property
    def n_generators(self) -> int:
        return self.generators.shape[1]

    def support(self, direction) -> float:
        """Support function ``max_{z in Z} <direction, z>``."""
        d = np.asarray(direction, dtype=float)
        return float(d @ self.center + np.abs(d @ self.generators).sum())

    def interval_hull(self) -> tuple[np.ndarray, np.ndarray]:
        """Lower and upper corners of the axis-aligned bounding box."""
        r = np.abs(self.generators).sum(axis=1)
        return self.center - r, self.center + r

    def to_dict(self) -> dict:
        return {
            "center": self.center.tolist(),
            "generators": self.generators.T.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Zonotope":
        c = np.asarray(data["center"], dtype=float)
        cols = data.get("generators") or []
        G = np.asarray(cols, dtype=float).T if len(cols) else np.zeros((c.shape[0], 0))
        return cls(c, G)

    def __repr__(self) -> str:
        return f"Zonotope(dim={self.dim}, n_generators={self.n_generators})"


def point(c) -> Zonotope:
    c = np.asarray(c, dtype=float).reshape(-1)
    return Zonotope(c, np.zeros((c.shape[0], 0)))


def box(center, half_widths) -> Zonotope:
    """Axis-aligned box; zero half-widths produce no generator."""
    c = np.asarray(center, dtype=float).reshape(-1)
    h = np.broadcast_to(np.asarray(half_widths, dtype=float), c.shape)
    keep = h != 0
    return Zonotope(c, np.diag(np.abs(h))[:, keep])


@dataclass(frozen=True, eq=False)
class Simplex:
    vertices: np.ndarray

    def __post_init__(self):
        V = np.asarray(self.vertices, dtype=float)
        if V.ndim != 2 or V.shape[0] != V.shape[1] + 1:
            raise GeometryError(f"a simplex in R^d needs d+1 vertices, got shape {V.shape}")
        object.__setattr__(self, "vertices", _frozen(V))

    @property
    def dim(self) -> int:
        return self.vertices.shape[1]


@dataclass(frozen=True, eq=False)
class Polygon2D:
    vertices: np.ndarray

    def __post_init__(self):
        V = np.asarray(self.vertices, dtype=float)
        if V.ndim != 2 or V.shape[1] != 2 or V.shape[0] < 3:
            raise GeometryError("a polygon needs at least 3 two-dimensional vertices")
        if signed_area(V) <= 0:
            raise GeometryError("polygon vertices must be counter-clockwise with positive area")
        object.__setattr__(self, "vertices", _frozen(V))

    def area(self) -> float:
        return signed_area(self.vertices)

    def to_dict(self) -> dict:
        return {"vertices": self.vertices.tolist()}


def signed_area(vertices) -> float:
    """Shoelace formula; positive for counter-clockwise order."""
    V = np.asarray(vertices, dtype=float)
    x, y = V[:, 0], V[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def linear_map(M, Z: Zonotope) -> Zonotope:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[1] != Z.dim:
        raise GeometryError(f"cannot map a {Z.dim}-d zonotope with a {M.shape} matrix")
    return Zonotope(M @ Z.center, M @ Z.generators)


def minkowski_sum(Z1: Zonotope, Z2: Zonotope) -> Zonotope:
    if Z1.dim != Z2.dim:
        raise GeometryError(f"dimension mismatch: {Z1.dim} vs {Z2.dim}")
    return Zonotope(Z1.center + Z2.center, np.hstack([Z1.generators, Z2.generators]))


def project(Z: Zonotope, dims: Sequence[int]) -> Zonotope:
    idx = list(dims)
    if any(i < 0 or i >= Z.dim for i in idx):
        raise GeometryError(f"projection indices {idx} out of range for dimension {Z.dim}")
    return Zonotope(Z.center[idx], Z.generators[idx, :])


def girard_order(G: np.ndarray) -> np.ndarray:
    """Generator indices sorted by increasing Girard score ``|g|_1 - |g|_inf``.

    A stable sort is used so ties always resolve the same way; the batched
    propagation in :mod:`prreach.reach` relies on this.
    """
    A = np.abs(G)
    score = A.sum(axis=0) - A.max(axis=0, initial=0.0)
    return np.argsort(score, kind="stable")


def reduce_order(Z: Zonotope, target_g: int) -> Zonotope:
    """Over-approximate ``Z`` by a zonotope with at most ``target_g`` generators.

    The ``g - (target_g - d)`` generators with the smallest Girard score are
    replaced by their interval hull; the rest are kept as they are.
    """
    d, g = Z.dim, Z.n_generators
    if target_g < d:
        raise GeometryError(f"target order {target_g} is below the dimension {d}")
    if g <= target_g:
        return Z
    order = girard_order(Z.generators)
    n_box = g - (target_g - d)
    boxed = Z.generators[:, order[:n_box]]
    kept = Z.generators[:, np.sort(order[n_box:])]
    # all d hull columns are kept, zero or not, so the generator count after
    # reduction is always exactly target_g
    hull = np.diag(np.abs(boxed).sum(axis=1))
    return Zonotope(Z.center, np.hstack([kept, hull]))


def volume(Z: Zonotope) -> float:
    """Zonotope volume: ``2^d * sum |det G_S|`` over all d-column subsets ``S``."""
    d, g = Z.dim, Z.n_generators
    if g < d:
        return 0.0
    G = Z.generators
    if d == 2:
        # pairwise 2x2 determinants, vectorised
        cross = np.abs(np.outer(G[0], G[1]) - np.outer(G[1], G[0]))
        return 4.0 * float(np.triu(cross, k=1).sum())
    total = 0.0
    for cols in itertools.combinations(range(g), d):
        total += abs(np.linalg.det(G[:, cols]))
    return float(2.0**d * total)


def _merge_parallel(G: np.ndarray, rtol: float = 1e-12) -> np.ndarray:
    """Orient generators into the upper half-plane, sort by angle, merge parallels."""
    norms = np.hypot(G[0], G[1])
    scale = norms.max(initial=0.0)
    G = G[:, norms > rtol * scale] if scale > 0 else G[:, :0]
    flip = (G[1] < 0) | ((G[1] == 0) & (G[0] < 0))
    G = np.where(flip, -G, G)
    ang = np.arctan2(G[1], G[0])
    order = np.argsort(ang, kind="stable")
    G, ang = G[:, order], ang[order]
    merged = []
    for j in range(G.shape[1]):
        if merged and abs(ang[j] - merged[-1][0]) <= 1e-12:
            merged[-1][1] += G[:, j]
        else:
            merged.append([ang[j], G[:, j].copy()])
    if not merged:
        return np.zeros((2, 0))
    return np.column_stack([v for _, v in merged])


def vertices_2d(Z: Zonotope) -> Polygon2D:
    """Vertices of a full-dimensional planar zonotope in counter-clockwise order."""
    if Z.dim != 2:
        raise GeometryError(f"vertex enumeration is only available in 2-D, got d={Z.dim}")
    G = _merge_parallel(Z.generators)
    if G.shape[1] < 2:
        raise GeometryError("degenerate zonotope: generators do not span the plane")
    start = Z.center - G.sum(axis=1)
    edges = np.hstack([2.0 * G, -2.0 * G])
    V = start + np.cumsum(edges, axis=1).T
    V = np.roll(V, 1, axis=0)
    return Polygon2D(V)


def triangulate(P: Polygon2D, apex=None) -> list[Simplex]:
    """Fan triangulation of a convex polygon from ``apex`` (default: vertex centroid)."""
    V = P.vertices
    a = V.mean(axis=0) if apex is None else np.asarray(apex, dtype=float)
    nxt = np.roll(V, -1, axis=0)
    return [Simplex(np.vstack([a, V[i], nxt[i]])) for i in range(V.shape[0])]


def simplex_volume(S: Simplex) -> float:
    V = S.vertices
    d = S.dim
    return abs(float(np.linalg.det((V[1:] - V[0]).T))) / math.factorial(d)
