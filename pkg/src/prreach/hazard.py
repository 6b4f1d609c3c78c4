"""Gridded hazard densities and their sum-of-powers-of-linear-forms fit.

A fitted map is ``P(x, y) = sum_i (l_i . (x, y, 1)) ** m_i``. The homogeneous
coordinate makes constants and affine offsets representable while every term
stays a power of a single linear form, which is what the simplex integration
in :mod:`prreach.risk` requires.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares

log = logging.getLogger(__name__)

SYNTH_KINDS = ("constant", "ramp", "gaussian-blobs")


class HazardDataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class HazardGrid:
    """Cell-centre samples ``(x, y, value)`` of a hazard density.

    ``bounds`` is ``(xmin, xmax, ymin, ymax)`` of the hazard region; cells
    outside it carry value 0. ``n_clamped`` counts input values that were
    clipped into ``[0, 1]`` while loading.
    """

    xy: np.ndarray
    values: np.ndarray
    bounds: tuple[float, float, float, float]
    n_clamped: int = 0

    def __post_init__(self):
        xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if xy.shape[0] != v.shape[0]:
            raise HazardDataError("positions and values differ in length")
        if np.any((v < 0) | (v > 1)):
            raise HazardDataError("hazard values must lie in [0, 1]")
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "values", v)

    def __len__(self) -> int:
        return self.values.shape[0]

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("x,y,value\n")
            for (x, y), v in zip(self.xy, self.values):
                fh.write(f"{float(x)!r},{float(y)!r},{float(v)!r}\n")


def _bounds_of(xy: np.ndarray, values: np.ndarray) -> tuple[float, float, float, float]:
    pts = xy[values > 0] if np.any(values > 0) else xy
    return (float(pts[:, 0].min()), float(pts[:, 0].max()), float(pts[:, 1].min()), float(pts[:, 1].max()))


def load_grid(path) -> HazardGrid:
    """Read a ``x,y,value`` CSV. Out-of-range values are clamped and counted."""
    path = Path(path)
    rows = []
    clamped = 0
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise HazardDataError(f"{path}: empty file")
        if [h.strip() for h in header] != ["x", "y", "value"]:
            raise HazardDataError(f"{path}: expected header 'x,y,value', got {','.join(header)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise HazardDataError(f"{path}: row {lineno} has {len(row)} columns, expected 3")
            try:
                x, y, v = (float(c) for c in row)
            except ValueError as exc:
                raise HazardDataError(f"{path}: row {lineno} is not numeric: {row}") from exc
            if not 0.0 <= v <= 1.0:
                clamped += 1
                v = min(max(v, 0.0), 1.0)
            rows.append((x, y, v))
    if not rows:
        raise HazardDataError(f"{path}: no data rows")
    if clamped:
        log.warning("%s: clamped %d value(s) into [0, 1]", path, clamped)
    data = np.array(rows)
    xy, values = data[:, :2], data[:, 2]
    return HazardGrid(xy, values, _bounds_of(xy, values), n_clamped=clamped)


def synth_grid(
    kind: str,
    params: dict | None = None,
    seed: int = 0,
    bounds: Sequence[float] = (0.0, 10.0, 0.0, 10.0),
    spacing: float = 1.0,
    pad: int = 0,
) -> HazardGrid:
    """Deterministic synthetic hazard grid.

    ``constant``: ``value``. ``ramp``: ``slope_x * x + slope_y * y + offset``
    (default ``x / 10``); with ``fold=True`` the absolute value is taken, so
    the ramp rises on both sides of the line where it crosses zero.
    ``gaussian-blobs``: ``n_blobs`` bumps of width ``sigma`` at seeded random
    centres with heights drawn from ``amplitude * U(0.5, 1)``; explicit
    ``centers`` (and optionally ``heights``) replace the random draws. ``pad``
    adds that many rings of zero-valued cells around ``bounds``.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown grid kind {kind!r}; choose from {', '.join(SYNTH_KINDS)}")
    params = dict(params or {})
    x0, x1, y0, y1 = (float(b) for b in bounds)
    nx = int(round((x1 - x0) / spacing))
    ny = int(round((y1 - y0) / spacing))
    xs = x0 + spacing * np.arange(-pad, nx + pad + 1)
    ys = y0 + spacing * np.arange(-pad, ny + pad + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    X, Y = X.ravel(), Y.ravel()
    eps = 1e-9 * spacing
    inside = (X >= x0 - eps) & (X <= x1 + eps) & (Y >= y0 - eps) & (Y <= y1 + eps)

    if kind == "constant":
        V = np.full(X.shape, float(params.get("value", 0.2)))
    elif kind == "ramp":
        V = (
            float(params.get("slope_x", 0.1)) * X
            + float(params.get("slope_y", 0.0)) * Y
            + float(params.get("offset", 0.0))
        )
        if params.get("fold", False):
            V = np.abs(V)
    else:
        rng = np.random.default_rng(seed)
        n = int(params.get("n_blobs", 3))
        amp = float(params.get("amplitude", 0.1))
        sigma = float(params.get("sigma", 2.0))
        if "centers" in params:
            centres = np.asarray(params["centers"], dtype=float).reshape(-1, 2)
            n = centres.shape[0]
        else:
            centres = rng.uniform([x0, y0], [x1, y1], size=(n, 2))
        if "heights" in params:
            heights = np.broadcast_to(np.asarray(params["heights"], dtype=float), (n,))
        else:
            heights = amp * rng.uniform(0.5, 1.0, size=n)
        V = np.zeros(X.shape)
        for (cx, cy), h in zip(centres, heights):
            V += h * np.exp(-((X - cx) ** 2 + (Y - cy) ** 2) / (2 * sigma**2))
    V = np.clip(V, 0.0, 1.0)
    V[~inside] = 0.0
    return HazardGrid(np.column_stack([X, Y]), V, (x0, x1, y0, y1))


@dataclass(frozen=True, eq=False)
class LinearFormPoly:
    """``sum over (m, l) in terms of (l . (x, y, 1)) ** m``."""

    terms: tuple[tuple[int, np.ndarray], ...] = ()
    M: int = 0

    def __post_init__(self):
        terms = tuple((int(m), np.asarray(l, dtype=float).reshape(-1)) for m, l in self.terms)
        for m, l in terms:
            if m < 1:
                raise ValueError("term degrees start at 1")
            if l.shape[0] < 2:
                raise ValueError("a linear form needs at least two coefficients")
        M = max([m for m, _ in terms], default=0)
        if self.M and M > self.M:
            raise ValueError(f"term degree {M} exceeds declared maximum {self.M}")
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "M", max(self.M, M))

    def __call__(self, x, y):
        return eval_poly(self, x, y)

    def translated(self, shift) -> "LinearFormPoly":
        """Polynomial ``Q`` with ``Q(p + shift) = P(p)``."""
        s = np.asarray(shift, dtype=float)
        out = []
        for m, l in self.terms:
            l2 = l.copy()
            l2[-1] = l[-1] - l[:-1] @ s
            out.append((m, l2))
        return LinearFormPoly(tuple(out), self.M)

    def to_dict(self) -> dict:
        return {"M": self.M, "terms": [{"m": m, "l": l.tolist()} for m, l in self.terms]}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearFormPoly":
        return cls(tuple((t["m"], t["l"]) for t in d["terms"]), int(d.get("M", 0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "LinearFormPoly":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def eval_poly(P: LinearFormPoly, x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    total = np.zeros(np.broadcast(x, y).shape)
    for m, l in P.terms:
        total = total + (l[0] * x + l[1] * y + l[2]) ** m
    return total if total.ndim else float(total)


@dataclass(frozen=True)
class FitReport:
    rmse: float
    max_abs_error: float
    n_cells: int
    n_starts: int
    start_costs: tuple[float, ...] = field(default=())

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "max_abs_error": self.max_abs_error,
            "n_cells": self.n_cells,
            "n_starts": self.n_starts,
            "start_costs": list(self.start_costs),
        }


def _model(theta: np.ndarray, degrees: np.ndarray, H: np.ndarray):
    """Values and Jacobian of the sum-of-powers model in normalised coordinates.

    Written with elementwise operations in a fixed order (no BLAS, no
    reductions) so that repeated fits are bit-for-bit identical.
    """
    L = theta.reshape(-1, 3)
    vals = np.zeros(H.shape[0])
    J = np.empty((H.shape[0], L.shape[0], 3))
    for t, (m, (a, b, c)) in enumerate(zip(degrees, L)):
        s = H[:, 0] * a + H[:, 1] * b + H[:, 2] * c
        vals = vals + s**m
        d = m * s ** (m - 1)
        J[:, t, 0] = d * H[:, 0]
        J[:, t, 1] = d * H[:, 1]
        J[:, t, 2] = d * H[:, 2]
    return vals, J.reshape(H.shape[0], -1)


def fit_poly(
    grid: HazardGrid,
    M: int = 3,
    terms_per_degree: int = 2,
    seed: int = 0,
    n_starts: int = 8,
) -> tuple[LinearFormPoly, FitReport]:
    """Least-squares fit of ``sum_{m<=M} sum_t (l_{m,t} . (x, y, 1))^m`` to the grid.

    Fitting happens in centred, scaled coordinates and the forms are mapped
    back exactly afterwards. The first start is the affine least-squares
    solution (higher-degree forms at zero), so the fit is never worse than
    an affine one; the other starts are seeded random draws.
    """
    if len(grid) == 0:
        raise HazardDataError("cannot fit an empty grid")
    if M < 1 or terms_per_degree < 1:
        raise ValueError("M and terms_per_degree must be at least 1")
    xy, v = grid.xy, grid.values
    centre = 0.5 * (xy.min(axis=0) + xy.max(axis=0))
    scale = 0.5 * float(np.max(xy.max(axis=0) - xy.min(axis=0)))
    if scale == 0:
        raise HazardDataError("singular fit: all cells share one position")
    H = np.column_stack([(xy - centre) / scale, np.ones(len(v))])

    degrees = np.repeat(np.arange(1, M + 1), terms_per_degree).astype(float)
    n_terms = degrees.shape[0]
    rng = np.random.default_rng(seed)
    amp = max(float(np.abs(v).max()), 1e-3)

    affine, *_ = np.linalg.lstsq(H, v, rcond=None)
    starts = []
    first = np.zeros((n_terms, 3))
    first[0] = affine
    starts.append(first.ravel())
    for _ in range(n_starts - 1):
        sd = (amp ** (1.0 / degrees))[:, None] * 0.5
        starts.append((rng.normal(size=(n_terms, 3)) * sd).ravel())

    def resid(theta):
        return _model(theta, degrees, H)[0] - v

    def jac(theta):
        return _model(theta, degrees, H)[1]

    best, costs = None, []
    for theta0 in starts:
        res = least_squares(resid, theta0, jac=jac, method="lm", xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=2000)
        costs.append(float(res.cost))
        if best is None or res.cost < best.cost:
            best = res

    L = best.x.reshape(n_terms, 3)
    terms = []
    for m, (a, b, c) in zip(degrees.astype(int), L):
        terms.append((m, np.array([a / scale, b / scale, c - (a * centre[0] + b * centre[1]) / scale])))
    poly = LinearFormPoly(tuple(terms), M)

    err = eval_poly(poly, xy[:, 0], xy[:, 1]) - v
    report = FitReport(
        rmse=float(np.sqrt(np.mean(err**2))),
        max_abs_error=float(np.abs(err).max()),
        n_cells=len(v),
        n_starts=len(starts),
        start_costs=tuple(costs),
    )
    return poly, report


# ---------------------------------------------------------------- bundled maps


def _data_file(name: str):
    return resources.files("prreach").joinpath("data", name)


def bundled_map_specs() -> dict[str, dict]:
    """Generator settings of the bundled synthetic maps, keyed by map name."""
    return json.loads(_data_file("maps.json").read_text(encoding="utf-8"))


def grid_from_spec(spec: dict) -> HazardGrid:
    return synth_grid(
        spec["kind"],
        spec.get("params"),
        seed=int(spec.get("seed", 0)),
        bounds=spec.get("bounds", (0.0, 10.0, 0.0, 10.0)),
        spacing=float(spec.get("spacing", 1.0)),
        pad=int(spec.get("pad", 0)),
    )


def bundled_maps() -> dict[str, LinearFormPoly]:
    """Fitted polynomials of the bundled maps (``data/<name>.json``)."""
    return {
        name: LinearFormPoly.from_dict(json.loads(_data_file(f"{name}.json").read_text(encoding="utf-8")))
        for name in bundled_map_specs()
    }
