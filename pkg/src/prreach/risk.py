"""Exact integration of linear-form powers over simplices, and reach-set risk.

For an affine form ``h`` and a d-simplex ``S`` with vertices ``s_0..s_d``::

    int_S h(x)^m dx = d! Vol(S) m! / (m + d)! * sum_{|j| = m} prod_i h(s_i)^{j_i}

The inner sum is the complete homogeneous symmetric polynomial of degree ``m``
in the vertex values, enumerated explicitly over multi-indices.
"""

from __future__ import annotations

import io
import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import geometry as geo
from .geometry import Simplex, Zonotope
from .hazard import LinearFormPoly

AREA_FLOOR = 1e-9


@lru_cache(maxsize=None)
def multi_indices(m: int, k: int) -> np.ndarray:
    """All ``j`` in N^k with ``|j| = m``, as an integer array of shape ``(C(m+k-1, k-1), k)``."""
    out = [
        j for j in itertools.product(range(m + 1), repeat=k) if sum(j) == m
    ]
    arr = np.array(out, dtype=int).reshape(-1, k)
    arr.flags.writeable = False
    return arr


def _complete_homogeneous(a: np.ndarray, m: int) -> np.ndarray:
    """``sum_{|j|=m} prod_i a_i^{j_i}`` over the last axis of ``a``."""
    J = multi_indices(m, a.shape[-1])
    return np.prod(a[..., None, :] ** J, axis=-1).sum(axis=-1)


def _complete_homogeneous_newton(a: np.ndarray, m: int) -> np.ndarray:
    """Same quantity as :func:`_complete_homogeneous` via Newton's identity
    ``k h_k = sum_{i=1}^k p_i h_{k-i}`` with power sums ``p_i``; much cheaper
    for large batches."""
    p = [None] + [(a**i).sum(axis=-1) for i in range(1, m + 1)]
    h = [np.ones(a.shape[:-1])]
    for k in range(1, m + 1):
        h.append(sum(p[i] * h[k - i] for i in range(1, k + 1)) / k)
    return h[m]


def integrate_term_over_simplex(l, m: int, S: Simplex) -> float:
    """``int_S (l . (x, 1))^m dx`` for a d-simplex and homogeneous form ``l`` of length d+1."""
    if m < 1:
        raise ValueError("degree must be at least 1")
    V = S.vertices
    d = S.dim
    l = np.asarray(l, dtype=float)
    if l.shape[0] != d + 1:
        raise ValueError(f"form length {l.shape[0]} does not match simplex dimension {d}")
    vol = geo.simplex_volume(S)
    if vol == 0.0:
        return 0.0
    a = V @ l[:-1] + l[-1]
    coeff = vol * math.factorial(d) * math.factorial(m) / math.factorial(m + d)
    return float(coeff * _complete_homogeneous(a, m))


def integrate_poly_over_triangles(P: LinearFormPoly, tris: np.ndarray) -> np.ndarray:
    """Integral of ``P`` over each triangle in ``tris`` (shape ``(..., 3, 2)``)."""
    tris = np.asarray(tris, dtype=float)
    e1 = tris[..., 1, :] - tris[..., 0, :]
    e2 = tris[..., 2, :] - tris[..., 0, :]
    area = 0.5 * np.abs(e1[..., 0] * e2[..., 1] - e1[..., 1] * e2[..., 0])
    total = np.zeros(tris.shape[:-2])
    for m, l in P.terms:
        a = tris @ l[:2] + l[2]
        total = total + area * (2.0 / ((m + 1) * (m + 2))) * _complete_homogeneous_newton(a, m)
    return total


def integrate_poly_over_zonotope(P: LinearFormPoly, Z: Zonotope) -> float:
    """Decompose ``Z`` (2-D) into simplices and sum the term integrals."""
    if Z.dim != 2:
        raise geo.GeometryError("polynomial integration is over planar zonotopes")
    simplices = geo.triangulate(geo.vertices_2d(Z))
    return float(
        sum(integrate_term_over_simplex(l, m, S) for S in simplices for m, l in P.terms)
    )


@dataclass
class DegenerateCounter:
    """Counts reach sets whose area fell below the floor."""

    count: int = 0


def reach_risk(
    P: LinearFormPoly,
    Z: Zonotope,
    clamp: bool = True,
    area_floor: float = AREA_FLOOR,
    counter: DegenerateCounter | None = None,
) -> float:
    """Mean of ``P`` over the planar set ``Z``, clipped into ``[0, 1]``."""
    area = geo.volume(Z)
    if area < area_floor:
        if counter is not None:
            counter.count += 1
        num = 0.0
    else:
        num = integrate_poly_over_zonotope(P, Z)
    p = num / max(area, area_floor)
    return min(max(p, 0.0), 1.0) if clamp else p


@dataclass(frozen=True, eq=False)
class RiskProfile:
    """Per-step hazard probabilities ``p_k`` for ``k = 1..T``."""

    per_step: np.ndarray
    degenerate_steps: int = 0

    def __post_init__(self):
        p = np.asarray(self.per_step, dtype=float).reshape(-1)
        if np.any((p < 0) | (p > 1)):
            raise ValueError("per-step risks must lie in [0, 1]")
        p.flags.writeable = False
        object.__setattr__(self, "per_step", p)

    @property
    def T(self) -> int:
        return self.per_step.shape[0]

    def cumulative(self) -> np.ndarray:
        return 1.0 - np.cumprod(1.0 - self.per_step)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("k,p_k,cumulative\n")
        for k, (p, c) in enumerate(zip(self.per_step, self.cumulative()), start=1):
            buf.write(f"{k},{float(p)!r},{float(c)!r}\n")
        return buf.getvalue()


@dataclass(frozen=True, eq=False)
class RiskThresholds:
    per_step: np.ndarray
    overall: float

    def __post_init__(self):
        r = np.asarray(self.per_step, dtype=float).reshape(-1)
        if np.any((r < 0) | (r > 1)) or not 0 <= self.overall <= 1:
            raise ValueError("risk thresholds must lie in [0, 1]")
        if 1.0 - np.prod(1.0 - r) > self.overall + 1e-12:
            raise ValueError("per-step thresholds exceed the overall risk budget")
        object.__setattr__(self, "per_step", r)

    @classmethod
    def from_per_step(cls, r) -> "RiskThresholds":
        r = np.asarray(r, dtype=float)
        return cls(r, float(1.0 - np.prod(1.0 - r)))

    @property
    def T(self) -> int:
        return self.per_step.shape[0]


def mission_success(*profiles: RiskProfile) -> float:
    """Probability that no hazard outcome occurs over the horizon.

    Several profiles (one per hazard outcome) are summed per step; the sum is
    capped at 1 before entering the product.
    """
    if not profiles:
        raise ValueError("need at least one risk profile")
    total = np.sum([p.per_step for p in profiles], axis=0)
    return float(np.prod(1.0 - np.minimum(total, 1.0)))


def risk_to_go(profile: RiskProfile, k_start: int) -> float:
    """``1 - prod_{k=k_start}^{T} (1 - p_k)`` with 1-based ``k_start``."""
    if not 1 <= k_start <= profile.T:
        raise ValueError(f"start step {k_start} outside 1..{profile.T}")
    return float(1.0 - np.prod(1.0 - profile.per_step[k_start - 1 :]))


def profile_for_sets(P: LinearFormPoly, sets: Sequence[Zonotope]) -> RiskProfile:
    counter = DegenerateCounter()
    p = [reach_risk(P, Z, counter=counter) for Z in sets]
    return RiskProfile(np.array(p), degenerate_steps=counter.count)


def lqr_baseline_thresholds(model, K, X0: Zonotope, T: int, P: LinearFormPoly, **reach_kw) -> RiskThresholds:
    """Per-step risk of the reach sets of ``model`` under gain ``K``."""
    from .dynamics import closed_loop
    from .reach import propagate

    seq = propagate(closed_loop(model, K), X0, model.disturbance_set(), T, **reach_kw)
    return RiskThresholds.from_per_step(profile_for_sets(P, seq.projected).per_step)


def parallelogram_risk(
    P: LinearFormPoly,
    centers: np.ndarray,
    gens: np.ndarray,
    clamp: bool = False,
    area_floor: float = AREA_FLOOR,
) -> np.ndarray:
    """Vectorised :func:`reach_risk` for planar two-generator zonotopes.

    ``centers`` has shape ``(..., 2)`` and ``gens`` shape ``(..., 2, 2)`` with
    generators as columns. Each set is split into four triangles fanned from
    its centre.
    """
    g1, g2 = gens[..., :, 0], gens[..., :, 1]
    c = centers
    ring = np.stack([c - g1 - g2, c + g1 - g2, c + g1 + g2, c - g1 + g2], axis=-2)
    nxt = np.roll(ring, -1, axis=-2)
    apex = np.broadcast_to(c[..., None, :], ring.shape)
    tris = np.stack([apex, ring, nxt], axis=-2)  # (..., 4, 3, 2)
    area = 4.0 * np.abs(g1[..., 0] * g2[..., 1] - g1[..., 1] * g2[..., 0])
    num = integrate_poly_over_triangles(P, tris).sum(axis=-1)
    num = np.where(area < area_floor, 0.0, num)
    p = num / np.maximum(area, area_floor)
    return np.clip(p, 0.0, 1.0) if clamp else p
