"""Reachability-based risk assessment and risk-bounded control for a quadrotor.

Reach sets of the closed loop are zonotopes; the risk of each set is the mean
of a polynomial hazard map over it. :func:`prreach.optimizer.solve` finds the
closed-loop matrix nearest the LQR loop whose per-step risks stay under given
thresholds and recovers the matching feedback gain.
"""

from .dynamics import ModelConfig, QuadrotorParams, closed_loop, discretize, lqr
from .geometry import Zonotope, box
from .hazard import LinearFormPoly, bundled_maps, fit_poly, load_grid, synth_grid
from .optimizer import ProblemSpec, Solution, SolverOptions, recover_gain, solve, verify
from .reach import propagate
from .risk import RiskProfile, RiskThresholds, reach_risk, risk_to_go
from .sim import ExperimentSetup, run_offline_experiment, run_online_experiment, simulate

__all__ = [
    "ExperimentSetup",
    "LinearFormPoly",
    "ModelConfig",
    "ProblemSpec",
    "QuadrotorParams",
    "RiskProfile",
    "RiskThresholds",
    "Solution",
    "SolverOptions",
    "Zonotope",
    "box",
    "bundled_maps",
    "closed_loop",
    "discretize",
    "fit_poly",
    "load_grid",
    "lqr",
    "propagate",
    "reach_risk",
    "recover_gain",
    "risk_to_go",
    "run_offline_experiment",
    "run_online_experiment",
    "simulate",
    "solve",
    "synth_grid",
    "verify",
]

__version__ = "0.1.0"
