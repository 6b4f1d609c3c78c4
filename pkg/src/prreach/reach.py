"""Closed-loop zonotope reach sets.

``Z(0) = X0`` and ``Z(k) = D Z(k-1) + Bw W`` for ``k = 1..T``, with Girard
order reduction after every step. Each set is also projected onto the
position plane and reduced to two generators, which is the set the risk is
evaluated on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import geometry as geo
from .geometry import Zonotope

POSITION_DIMS = (0, 1)
PROJECTED_ORDER = 2


def default_order(n: int) -> int:
    return max(n, 2 * n)


@dataclass(frozen=True, eq=False)
class ReachSequence:
    sets: tuple[Zonotope, ...]
    projected: tuple[Zonotope, ...]

    def __len__(self) -> int:
        return len(self.sets)

    def to_jsonl(self) -> str:
        lines = []
        for k, (Z, P) in enumerate(zip(self.sets, self.projected), start=1):
            try:
                verts = geo.vertices_2d(P).vertices.tolist()
            except geo.GeometryError:
                verts = []
            lines.append(
                json.dumps({"k": k, "center": P.center.tolist(), "vertices": verts, "n_generators": Z.n_generators})
            )
        return "\n".join(lines) + "\n"


def _resolve_order(reduce_to, n: int) -> int | None:
    if reduce_to == "auto":
        return default_order(n)
    return reduce_to


def propagate(
    D,
    X0: Zonotope,
    BwW: Zonotope,
    T: int,
    reduce_to: int | None | str = "auto",
    dims: Sequence[int] = POSITION_DIMS,
) -> ReachSequence:
    """Reach sets ``Z(1..T)`` of ``x+ = D x + w``, ``w`` in ``BwW``.

    ``reduce_to=None`` disables order reduction of the full-dimensional sets
    (the projected sets are always reduced to two generators).
    """
    D = np.asarray(D, dtype=float)
    n = X0.dim
    if D.shape != (n, n) or BwW.dim != n:
        raise geo.GeometryError(f"closed-loop matrix {D.shape} incompatible with {n}-d sets")
    if T < 1:
        raise ValueError("horizon must be at least one step")
    order = _resolve_order(reduce_to, n)
    sets, projected = [], []
    Z = X0
    for _ in range(T):
        Z = geo.minkowski_sum(geo.linear_map(D, Z), BwW)
        if order is not None:
            Z = geo.reduce_order(Z, order)
        sets.append(Z)
        projected.append(geo.reduce_order(geo.project(Z, dims), PROJECTED_ORDER))
    return ReachSequence(tuple(sets), tuple(projected))


def closed_form(D, X0: Zonotope, BwW: Zonotope, k: int) -> Zonotope:
    """``D^k X0 + sum_{l=0}^{k-1} D^l BwW`` without reduction (for cross-checks)."""
    D = np.asarray(D, dtype=float)
    Z = geo.linear_map(np.linalg.matrix_power(D, k), X0)
    for l in range(k):
        Z = geo.minkowski_sum(Z, geo.linear_map(np.linalg.matrix_power(D, l), BwW))
    return Z


def propagate_parallelograms(
    D_batch,
    X0: Zonotope,
    BwW: Zonotope,
    T: int,
    reduce_to: int | None | str = "auto",
    dims: Sequence[int] = POSITION_DIMS,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised twin of :func:`propagate` for a stack of closed-loop matrices.

    Returns the projected two-generator sets as ``centers`` of shape
    ``(b, T, 2)`` and ``gens`` of shape ``(b, T, 2, 2)`` (zero-padded when the
    projection has fewer than two generators). Reduction choices match the
    scalar path exactly, including the stable tie-breaking.
    """
    Ds = np.asarray(D_batch, dtype=float)
    b, n, _ = Ds.shape
    order = _resolve_order(reduce_to, n)
    dims = list(dims)
    c = np.broadcast_to(X0.center, (b, n)).copy()
    G = np.broadcast_to(X0.generators, (b, n, X0.n_generators)).copy()
    cw = BwW.center
    Gw = np.broadcast_to(BwW.generators, (b, n, BwW.n_generators))
    centers = np.empty((b, T, 2))
    gens = np.zeros((b, T, 2, 2))
    rows = np.arange(b)[:, None]
    for k in range(T):
        c = np.einsum("bij,bj->bi", Ds, c) + cw
        G = np.concatenate([Ds @ G, Gw], axis=2)
        g = G.shape[2]
        if order is not None and g > order:
            A = np.abs(G)
            score = A.sum(axis=1) - A.max(axis=1)
            idx = np.argsort(score, axis=1, kind="stable")
            n_box = g - (order - n)
            boxed = G[rows, :, idx[:, :n_box]]  # (b, n_box, n)
            kept = G[rows, :, np.sort(idx[:, n_box:], axis=1)]  # (b, keep, n)
            radii = np.abs(boxed).sum(axis=1)
            hull = radii[:, :, None] * np.eye(n)
            G = np.concatenate([np.swapaxes(kept, 1, 2), hull], axis=2)
        centers[:, k] = c[:, dims]
        Gp = G[:, dims, :]
        if Gp.shape[2] <= PROJECTED_ORDER:
            gens[:, k, :, : Gp.shape[2]] = Gp
        else:
            radii = np.abs(Gp).sum(axis=2)
            gens[:, k, 0, 0] = radii[:, 0]
            gens[:, k, 1, 1] = radii[:, 1]
    return centers, gens
