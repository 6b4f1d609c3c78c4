"""Quadrotor linear models, hazard-cause variants, ZOH discretisation and LQR.

State ordering is ``[x, y, z, phi, gamma, psi, u, v, w, p, q, r]`` and the
input is ``[f_t, tau_x, tau_y, tau_z]``. The drift, control and disturbance
matrices are laid out entry-for-entry as published for this model; in
particular position rows couple to the attitude block and the rate rows
integrate the linear velocities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal, Union

import numpy as np

from .geometry import Zonotope

N_STATES = 12
N_INPUTS = 4
N_DISTURBANCES = 6


class LQRConvergenceError(RuntimeError):
    """The Riccati iteration failed to converge within its iteration cap."""


@dataclass(frozen=True)
class QuadrotorParams:
    m: float = 1.5
    g: float = 9.81
    Jx: float = 0.02
    Jy: float = 0.02
    Jz: float = 0.04
    dt: float = 0.01

    def __post_init__(self):
        for name in ("m", "g", "Jx", "Jy", "Jz", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"quadrotor parameter {name} must be strictly positive")


@dataclass(frozen=True, eq=False)
class LinearModel:
    """``x+ = A x + B u + Bw w`` (discrete) or ``dx/dt = A x + B u + Bw w``.

    ``W`` is the disturbance set attached by a wind hazard; ``None`` means no
    disturbance acts on the system.
    """

    A: np.ndarray
    B: np.ndarray
    Bw: np.ndarray
    time_domain: Literal["continuous", "discrete"] = "continuous"
    dt: float | None = None
    W: Zonotope | None = None

    def __post_init__(self):
        A, B, Bw = (np.array(M, dtype=float) for M in (self.A, self.B, self.Bw))
        n = A.shape[0]
        if A.shape != (n, n) or B.shape[0] != n or Bw.shape[0] != n:
            raise ValueError(f"inconsistent model shapes A{A.shape} B{B.shape} Bw{Bw.shape}")
        if self.W is not None and self.W.dim != Bw.shape[1]:
            raise ValueError("disturbance set dimension does not match Bw")
        if self.time_domain == "discrete" and not self.dt:
            raise ValueError("a discrete model needs a sample time")
        for name, M in (("A", A), ("B", B), ("Bw", Bw)):
            M.flags.writeable = False
            object.__setattr__(self, name, M)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def disturbance_set(self) -> Zonotope:
        """``Bw W`` as a zonotope in state space (a point at the origin without wind)."""
        if self.W is None:
            return Zonotope(np.zeros(self.n), np.zeros((self.n, 0)))
        return Zonotope(self.Bw @ self.W.center, self.Bw @ self.W.generators)


@dataclass(frozen=True)
class NoHazard:
    name: str = field(default="none", init=False)


@dataclass(frozen=True)
class DeficientRotor:
    alpha: float = 0.4
    name: str = field(default="rotor", init=False)

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("deficient-rotor scale must lie in (0, 1]")


@dataclass(frozen=True)
class SensorError:
    alpha_x: float = 0.6
    alpha_y: float = 0.6
    name: str = field(default="sensor", init=False)

    def __post_init__(self):
        if not (0 < self.alpha_x <= 1 and 0 < self.alpha_y <= 1):
            raise ValueError("sensor-error scales must lie in (0, 1]")


@dataclass(frozen=True, eq=False)
class WindDisturbance:
    W: Zonotope
    name: str = field(default="wind", init=False)

    def __post_init__(self):
        if self.W.dim != N_DISTURBANCES:
            raise ValueError(f"wind set must be {N_DISTURBANCES}-dimensional")


HazardCause = Union[NoHazard, DeficientRotor, SensorError, WindDisturbance]


def wind_zonotope(mean, std, n_sigma: float = 3.0) -> Zonotope:
    """Box ``mean +/- n_sigma * std`` covering a Gaussian wind model."""
    mean = np.asarray(mean, dtype=float).reshape(-1)
    half = np.broadcast_to(n_sigma * np.asarray(std, dtype=float), mean.shape)
    return Zonotope(mean, np.diag(half))


def disturbance_matrix(params: QuadrotorParams) -> np.ndarray:
    Bw = np.zeros((N_STATES, N_DISTURBANCES))
    Bw[6, 0] = Bw[7, 1] = Bw[8, 2] = 1.0 / params.m
    Bw[3, 3] = 1.0 / params.Jx
    Bw[4, 4] = 1.0 / params.Jy
    Bw[5, 5] = 1.0 / params.Jz
    return Bw


def build_nominal(params: QuadrotorParams) -> LinearModel:
    g = params.g
    A = np.zeros((N_STATES, N_STATES))
    A[0:3, 3:6] = np.eye(3)
    A[6, 1] = -g
    A[7, 0] = g
    A[9:12, 6:9] = np.eye(3)

    B = np.zeros((N_STATES, N_INPUTS))
    B[3, 1] = 1.0 / params.Jx
    B[4, 2] = 1.0 / params.Jy
    B[5, 3] = 1.0 / params.Jz
    B[8, 0] = 1.0 / params.m
    return LinearModel(A, B, disturbance_matrix(params))


def apply_hazard(model: LinearModel, cause: HazardCause) -> LinearModel:
    if model.time_domain != "continuous":
        raise ValueError("hazard causes are applied to the continuous-time model")
    if isinstance(cause, NoHazard):
        return model
    if isinstance(cause, DeficientRotor):
        return replace(model, B=cause.alpha * model.B)
    if isinstance(cause, SensorError):
        A = model.A.copy()
        A[0, 0] = cause.alpha_x
        A[1, 1] = cause.alpha_y
        return replace(model, A=A)
    if isinstance(cause, WindDisturbance):
        return replace(model, W=cause.W)
    raise TypeError(f"unknown hazard cause {cause!r}")


def _expm_series(M: np.ndarray, tol: float = 1e-14, max_terms: int = 200) -> np.ndarray:
    """Matrix exponential by scaling and squaring of a truncated Taylor series."""
    norm = np.linalg.norm(M, 1)
    s = max(0, int(np.ceil(np.log2(norm / 0.5)))) if norm > 0.5 else 0
    X = M / 2.0**s
    term = np.eye(M.shape[0])
    total = term.copy()
    for k in range(1, max_terms):
        term = term @ X / k
        total += term
        if np.linalg.norm(term, 1) <= tol * np.linalg.norm(total, 1):
            break
    for _ in range(s):
        total = total @ total
    return total


def expm(M) -> np.ndarray:
    return _expm_series(np.asarray(M, dtype=float))


def discretize(model: LinearModel, dt: float) -> LinearModel:
    """Zero-order-hold discretisation.

    One exponential of the block matrix ``[[A, [B Bw]], [0, 0]] * dt`` yields
    ``exp(A dt)`` in its leading block and ``(int_0^dt exp(A s) ds) [B Bw]``
    in the top-right block.
    """
    if model.time_domain != "continuous":
        raise ValueError("model is already discrete")
    n, m = model.B.shape
    p = model.Bw.shape[1]
    aug = np.zeros((n + m + p, n + m + p))
    aug[:n, :n] = model.A
    aug[:n, n : n + m] = model.B
    aug[:n, n + m :] = model.Bw
    E = _expm_series(aug * dt)
    return LinearModel(
        E[:n, :n], E[:n, n : n + m], E[:n, n + m :], time_domain="discrete", dt=dt, W=model.W
    )


def dare_residual(A, B, Q, R, P) -> float:
    BtPA = B.T @ P @ A
    res = A.T @ P @ A - P - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA) + Q
    return float(np.linalg.norm(res))


def solve_dare(A, B, Q, R, tol: float = 1e-9, max_iter: int = 100_000) -> np.ndarray:
    """Stabilising solution of the discrete algebraic Riccati equation.

    A structure-preserving doubling pass gets close quickly; plain Riccati
    recursion then polishes until the residual norm is below ``tol``. The
    combined iteration count is capped at ``max_iter``.
    """
    A, B, Q, R = (np.asarray(M, dtype=float) for M in (A, B, Q, R))
    n = A.shape[0]
    I = np.eye(n)
    Ak, Gk, Hk = A.copy(), B @ np.linalg.solve(R, B.T), Q.copy()
    it = 0
    for it in range(1, 200):
        W = np.linalg.solve(I + Gk @ Hk, np.hstack([Ak, Gk]))
        WA, WG = W[:, :n], W[:, n:]
        H_next = Hk + Ak.T @ Hk @ WA
        Gk, Ak = Gk + Ak @ WG @ Ak.T, Ak @ WA
        if not np.all(np.isfinite(H_next)) or np.abs(H_next).max() > 1e150:
            raise LQRConvergenceError("Riccati iteration diverged; (A, B) may not be stabilisable")
        done = np.linalg.norm(H_next - Hk) <= 1e-14 * max(1.0, np.linalg.norm(H_next))
        Hk = 0.5 * (H_next + H_next.T)
        if done:
            break
    P = Hk
    while dare_residual(A, B, Q, R, P) > tol:
        it += 1
        if it >= max_iter:
            raise LQRConvergenceError(f"Riccati residual above {tol:g} after {max_iter} iterations")
        BtPA = B.T @ P @ A
        P = Q + A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA)
        P = 0.5 * (P + P.T)
        if not np.all(np.isfinite(P)):
            raise LQRConvergenceError("Riccati recursion produced non-finite values")
    return P


def lqr(model: LinearModel, Q=None, R=None) -> np.ndarray:
    """Discrete LQR gain ``K`` for ``u = -K x``."""
    if model.time_domain != "discrete":
        raise ValueError("lqr expects a discrete-time model")
    n, m = model.B.shape
    Q = np.eye(n) if Q is None else np.asarray(Q, dtype=float)
    R = np.eye(m) if R is None else np.asarray(R, dtype=float)
    P = solve_dare(model.A, model.B, Q, R)
    B = model.B
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ model.A)


def closed_loop(model: LinearModel, K) -> np.ndarray:
    K = np.asarray(K, dtype=float)
    if K.shape != (model.B.shape[1], model.n):
        raise ValueError(f"gain shape {K.shape} does not match model ({model.B.shape[1]}, {model.n})")
    return model.A - model.B @ K


def spectral_radius(M) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(M))))


@dataclass(frozen=True)
class ModelConfig:
    """Model and mission parameters read from the JSON config."""

    params: QuadrotorParams = field(default_factory=QuadrotorParams)
    T: int = 25
    alpha_dr: float = 0.4
    alpha_se: tuple[float, float] = (0.6, 0.6)
    # the published mean lists five components for a six-axis disturbance;
    # the missing yaw-torque component is taken as zero
    wind_mean: tuple[float, ...] = (0.05, 0.31, 0.0, -0.005, -0.03, 0.0)
    wind_std: float = 0.03

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        params = QuadrotorParams(**{k: float(d[k]) for k in ("m", "g", "Jx", "Jy", "Jz", "dt") if k in d})
        kw = {}
        if "T" in d:
            kw["T"] = int(d["T"])
        if "alpha_dr" in d:
            kw["alpha_dr"] = float(d["alpha_dr"])
        if "alpha_se" in d:
            kw["alpha_se"] = tuple(float(a) for a in d["alpha_se"])
        if "wind_mean" in d:
            mean = [float(a) for a in d["wind_mean"]]
            if len(mean) != N_DISTURBANCES:
                raise ValueError(f"wind_mean needs {N_DISTURBANCES} entries, got {len(mean)}")
            kw["wind_mean"] = tuple(mean)
        if "wind_std" in d:
            kw["wind_std"] = float(d["wind_std"])
        return cls(params=params, **kw)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        p = self.params
        return {
            "m": p.m, "g": p.g, "Jx": p.Jx, "Jy": p.Jy, "Jz": p.Jz, "dt": p.dt,
            "T": self.T,
            "alpha_dr": self.alpha_dr,
            "alpha_se": list(self.alpha_se),
            "wind_mean": list(self.wind_mean),
            "wind_std": self.wind_std,
        }

    def causes(self) -> dict[str, HazardCause]:
        return {
            "rotor": DeficientRotor(self.alpha_dr),
            "sensor": SensorError(*self.alpha_se),
            "wind": WindDisturbance(wind_zonotope(self.wind_mean, self.wind_std)),
        }
