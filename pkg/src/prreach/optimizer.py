"""Risk-bounded controller synthesis.

Find the closed-loop matrix ``D`` closest (Frobenius) to the baseline
``A - B K0`` whose reach sets keep the per-step hazard probability below the
thresholds ``r_k``, then recover the gain ``K' = pinv(B) (A - D)``.

The solver is an augmented-Lagrangian outer loop around L-BFGS. Constraint
Jacobians are central finite differences evaluated in one vectorised batch.
By default ``D`` is restricted to the closed loops the actuators can realise,
``D = D0 - U Y`` with ``U`` an orthonormal basis of ``range(B)``, so the
recovered gain reproduces ``D`` exactly. ``space="full"`` optimises all
``n^2`` entries instead.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.optimize import minimize

from . import reach
from .dynamics import LinearModel, closed_loop, spectral_radius
from .geometry import Zonotope
from .hazard import LinearFormPoly
from .risk import (
    AREA_FLOOR,
    RiskProfile,
    RiskThresholds,
    parallelogram_risk,
    profile_for_sets,
)

log = logging.getLogger(__name__)

STATUSES = ("optimal", "feasible", "infeasible", "max_iter")


class DegenerateProblemError(ValueError):
    """The baseline reach sets have (near) zero area in the risk plane."""


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    model: LinearModel
    K0: np.ndarray
    X0: Zonotope
    poly: LinearFormPoly
    thresholds: RiskThresholds
    BwW: Zonotope | None = None
    reduce_to: int | None | str = "auto"

    def __post_init__(self):
        if self.model.time_domain != "discrete":
            raise ValueError("the optimisation works on a discrete-time model")
        K0 = np.asarray(self.K0, dtype=float)
        if K0.shape != (self.model.B.shape[1], self.model.n):
            raise ValueError(f"baseline gain shape {K0.shape} does not match the model")
        if self.X0.dim != self.model.n:
            raise ValueError("initial set dimension does not match the model")
        object.__setattr__(self, "K0", K0)
        if self.BwW is None:
            object.__setattr__(self, "BwW", self.model.disturbance_set())

    @property
    def T(self) -> int:
        return self.thresholds.T

    @property
    def D0(self) -> np.ndarray:
        return closed_loop(self.model, self.K0)


@dataclass(frozen=True)
class SolverOptions:
    penalty_start: float = 10.0
    penalty_growth: float = 10.0
    max_rounds: int = 6
    max_iter: int = 5000
    fd_step: float = 1e-6
    tol_violation: float = 1e-8
    tol_step: float = 1e-9
    # thresholds are tightened by this much internally so that the small
    # residual violation an augmented Lagrangian ends with stays on the safe side
    margin: float = 1e-7
    space: Literal["realizable", "full"] = "realizable"


@dataclass(frozen=True, eq=False)
class Solution:
    D_star: np.ndarray
    K_prime: np.ndarray
    objective: float
    objective_gain: float
    recovery_residual: float
    per_step_risk: RiskProfile
    status: str
    iterations: int
    runtime: float
    horizon: int
    rounds: tuple[dict, ...] = ()
    spectral_radius: float = float("nan")

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "feasible")

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "horizon": self.horizon,
            "objective_closed_loop": self.objective,
            "objective_gain": self.objective_gain,
            "recovery_residual": self.recovery_residual,
            "spectral_radius": self.spectral_radius,
            "iterations": self.iterations,
            "runtime_seconds": self.runtime,
            "per_step_risk": self.per_step_risk.per_step.tolist(),
            "D_star": self.D_star.tolist(),
            "K_prime": self.K_prime.tolist(),
            "rounds": list(self.rounds),
        }


def frobenius_objective(D, D0) -> float:
    """``||D - D0||_F^2``, the quantity the solver minimises."""
    E = np.asarray(D, dtype=float) - np.asarray(D0, dtype=float)
    return float(np.sum(E * E))


def frobenius_objective_grad(D, D0) -> np.ndarray:
    return 2.0 * (np.asarray(D, dtype=float) - np.asarray(D0, dtype=float))


def recover_gain(A, B, D, rcond: float = 1e-12) -> np.ndarray:
    """``K = pinv(B) (A - D)`` with an SVD pseudoinverse (cutoff ``rcond * s_max``)."""
    A, B, D = (np.asarray(M, dtype=float) for M in (A, B, D))
    U, s, Vt = np.linalg.svd(B, full_matrices=False)
    keep = s > rcond * s.max(initial=0.0)
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    return (Vt.T * s_inv) @ (U.T @ (A - D))


def recovery_residual(A, B, D, K) -> float:
    return float(np.linalg.norm(np.asarray(A) - np.asarray(B) @ K - np.asarray(D)))


class _RiskModel:
    """Raw (unclamped) per-step risks for stacks of closed-loop matrices."""

    def __init__(self, spec: ProblemSpec, opts: SolverOptions):
        self.spec = spec
        self.opts = opts
        n = spec.model.n
        self.D0 = spec.D0
        if opts.space == "realizable":
            U, s, _ = np.linalg.svd(spec.model.B, full_matrices=False)
            self.U = U[:, s > 1e-12 * s.max(initial=0.0)]
            self.shape = (self.U.shape[1], n)
        elif opts.space == "full":
            self.U = None
            self.shape = (n, n)
        else:
            raise ValueError(f"unknown search space {opts.space!r}")
        self.r = spec.thresholds.per_step
        self.scale = np.ones_like(self.r)

    def set_scale(self, J: np.ndarray) -> None:
        """Divide each constraint by its gradient norm at the start point.

        Early steps depend on ``D`` only weakly (a few sampling periods of
        control authority), so their raw gradients are orders of magnitude
        smaller than late ones. Normalising makes the penalty see constraint
        values in units of parameter distance.
        """
        norms = np.linalg.norm(J, axis=1)
        self.scale = np.maximum(norms, 1e-6 * max(float(norms.max(initial=0.0)), 1e-12))

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]

    def to_D(self, x: np.ndarray) -> np.ndarray:
        """Map parameters (``(..., size)``) to closed-loop matrices."""
        Y = x.reshape(x.shape[:-1] + self.shape)
        if self.U is None:
            return self.D0 + Y
        return self.D0 - self.U @ Y

    def risks(self, Ds: np.ndarray) -> np.ndarray:
        s = self.spec
        c, g = reach.propagate_parallelograms(Ds, s.X0, s.BwW, s.T, s.reduce_to)
        return parallelogram_risk(s.poly, c, g)

    def constraints(self, x: np.ndarray, with_jac: bool):
        """Scaled constraint values ``(risk - r + margin) / scale`` and their Jacobian."""
        if not with_jac:
            p = self.risks(self.to_D(x)[None])[0]
            return p, None
        h = self.opts.fd_step * np.maximum(1.0, np.abs(x))
        E = np.diag(h)
        X = np.vstack([x[None], x + E, x - E])
        P = self.risks(self.to_D(X))
        p = P[0]
        k = x.shape[0]
        J = ((P[1 : k + 1] - P[k + 1 :]) / (2 * h[:, None])).T
        return p, J


def _violation(p: np.ndarray, r: np.ndarray) -> float:
    return float(np.max(p - r, initial=0.0))


def solve(spec: ProblemSpec, opts: SolverOptions | None = None) -> Solution:
    """Minimise ``||D - D0||_F`` subject to the per-step risk thresholds."""
    # trial points far from D0 can be unstable and overflow; those evaluate to
    # inf/nan and are rejected by the line search, so the warnings are noise
    with np.errstate(over="ignore", invalid="ignore"):
        return _solve(spec, opts or SolverOptions())


def _solve(spec: ProblemSpec, opts: SolverOptions) -> Solution:
    t0 = time.perf_counter()
    rm = _RiskModel(spec, opts)
    A, B = spec.model.A, spec.model.B
    r = rm.r

    c0, g0 = reach.propagate_parallelograms(spec.D0[None], spec.X0, spec.BwW, spec.T, spec.reduce_to)
    area = 4.0 * np.abs(g0[0, :, 0, 0] * g0[0, :, 1, 1] - g0[0, :, 1, 0] * g0[0, :, 0, 1])
    if np.any(area < AREA_FLOOR):
        raise DegenerateProblemError(
            f"baseline reach sets are degenerate at steps {np.flatnonzero(area < AREA_FLOOR) + 1}"
        )

    x = np.zeros(rm.size)
    p, J0 = rm.constraints(x, with_jac=True)
    rm.set_scale(J0)
    rounds: list[dict] = []
    iterations = 0
    status = None

    if _violation(p, r) <= opts.tol_violation:
        status = "optimal"
    else:
        lam = np.zeros(spec.T)
        mu = opts.penalty_start
        r_int = r - opts.margin
        best_feasible = None
        prev_violation = np.inf
        converged = False

        for rnd in range(opts.max_rounds):
            if iterations >= opts.max_iter:
                break

            def fun(z, lam=lam, mu=mu):
                pz, J = rm.constraints(z, with_jac=True)
                gz = (pz - r_int) / rm.scale
                act = np.maximum(0.0, lam + mu * gz)
                val = float(z @ z) + float((act**2 - lam**2).sum()) / (2.0 * mu)
                grad = 2.0 * z + J.T @ (act / rm.scale)
                return val, grad

            res = minimize(
                fun,
                x,
                jac=True,
                method="L-BFGS-B",
                options={"maxiter": max(1, opts.max_iter - iterations), "ftol": 1e-15, "gtol": 1e-12, "maxcor": 30},
            )
            iterations += int(res.nit)
            x_new = res.x
            p_new, _ = rm.constraints(x_new, with_jac=False)
            viol = _violation(p_new, r)
            step = float(np.linalg.norm(x_new - x))
            accepted = viol <= prev_violation
            if accepted:
                lam = np.maximum(0.0, lam + mu * (p_new - r_int) / rm.scale)
                x, p, prev_violation = x_new, p_new, viol
                if viol <= opts.tol_violation:
                    obj = float(np.linalg.norm(x))
                    if best_feasible is None or obj <= best_feasible[1]:
                        best_feasible = (x.copy(), obj, p.copy())
            rounds.append(
                {
                    "round": rnd + 1,
                    "penalty": mu,
                    "violation": prev_violation,
                    "objective": float(np.linalg.norm(x)),
                    "inner_iterations": int(res.nit),
                    "step": step,
                    "accepted": accepted,
                    "message": str(res.message),
                }
            )
            log.debug("round %d: mu=%g violation=%.3e step=%.3e", rnd + 1, mu, viol, step)
            if accepted and viol <= opts.tol_violation and step <= opts.tol_step:
                converged = True
                break
            mu *= opts.penalty_growth

        if best_feasible is not None:
            x, _, p = best_feasible
            status = "optimal" if converged else "feasible"
        elif iterations >= opts.max_iter:
            status = "max_iter"
        else:
            status = "infeasible"

    D_star = rm.to_D(x)
    K_prime = recover_gain(A, B, D_star)
    D_real = A - B @ K_prime
    p_clamped = np.clip(p, 0.0, 1.0)
    sol = Solution(
        D_star=D_star,
        K_prime=K_prime,
        objective=float(np.linalg.norm(D_star - spec.D0)),
        objective_gain=float(np.linalg.norm(spec.K0 - K_prime)),
        recovery_residual=recovery_residual(A, B, D_star, K_prime),
        per_step_risk=RiskProfile(p_clamped),
        status=status,
        iterations=iterations,
        runtime=time.perf_counter() - t0,
        horizon=spec.T,
        rounds=tuple(rounds),
        spectral_radius=spectral_radius(D_real),
    )
    if sol.spectral_radius >= 1.0:
        log.warning("optimised closed loop is not Schur stable (spectral radius %.4f)", sol.spectral_radius)
    return sol


@dataclass(frozen=True, eq=False)
class Verification:
    profile: RiskProfile
    feasible: bool
    excess: np.ndarray

    @property
    def max_excess(self) -> float:
        return float(self.excess.max(initial=0.0))


def verify(spec: ProblemSpec, K, tol: float = 1e-6) -> Verification:
    """Re-propagate the realised loop ``A - B K`` and recheck every threshold.

    Uses the reference geometry path (vertex enumeration and per-simplex
    integration), independent of the vectorised evaluator inside :func:`solve`.
    """
    D = closed_loop(spec.model, np.asarray(K, dtype=float))
    seq = reach.propagate(D, spec.X0, spec.BwW, spec.T, spec.reduce_to)
    profile = profile_for_sets(spec.poly, seq.projected)
    excess = profile.per_step - spec.thresholds.per_step
    return Verification(profile, bool(np.all(excess <= tol)), excess)
