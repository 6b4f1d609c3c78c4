"""Closed-loop flight simulation and the offline / online experiments.

All reach sets here are computed on the tracking error ``x - target``. The
target sits at the origin of the (x, y) plane with a fixed altitude, and the
altitude column of ``A`` is zero, so the error obeys the same closed-loop
recursion as the state and the (x, y) projection is unchanged.
"""

from __future__ import annotations

import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import reach
from .dynamics import (
    HazardCause,
    LinearModel,
    ModelConfig,
    apply_hazard,
    build_nominal,
    closed_loop,
    discretize,
    lqr,
)
from .geometry import Zonotope, box
from .hazard import LinearFormPoly
from .optimizer import (
    DegenerateProblemError,
    ProblemSpec,
    Solution,
    SolverOptions,
    solve,
)
from .risk import RiskProfile, RiskThresholds, profile_for_sets, risk_to_go

log = logging.getLogger(__name__)

START_XY = (5.5, 6.0)
X0_HALF_WIDTH = 0.5
ONLINE_HALF_WIDTH = 0.05
TARGET_ALTITUDE = 10.0
ALTITUDE_INDEX = 2
ONLINE_THRESHOLD_MODES = ("nominal", "nominal-and-offline")


def make_target(n: int = 12, altitude: float = TARGET_ALTITUDE) -> np.ndarray:
    t = np.zeros(n)
    t[ALTITUDE_INDEX] = altitude
    return t


def planar_box(n: int, center_xy, half_width: float) -> Zonotope:
    """Error-coordinate box: ``half_width`` in x and y, exact in every other state."""
    c = np.zeros(n)
    c[:2] = center_xy
    h = np.zeros(n)
    h[:2] = half_width
    return box(c, h)


@dataclass(frozen=True)
class WindSampler:
    """i.i.d. Gaussian wind, optionally clipped to the box of ``W``."""

    mean: np.ndarray
    std: float
    W: Zonotope | None = None
    clip: bool = True

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        mean = np.asarray(self.mean, dtype=float)
        w = rng.normal(mean, self.std)
        if self.clip and self.W is not None:
            lo, hi = self.W.interval_hull()
            w = np.clip(w, lo, hi)
        return w

    @classmethod
    def from_config(cls, cfg: ModelConfig, clip: bool = True) -> "WindSampler":
        return cls(np.asarray(cfg.wind_mean, dtype=float), cfg.wind_std, cfg.causes()["wind"].W, clip)


@dataclass(frozen=True)
class FlightConfig:
    x0: np.ndarray
    target: np.ndarray
    T: int
    cause: HazardCause
    onset: int = 0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.onset <= self.T:
            raise ValueError(f"onset {self.onset} outside 0..{self.T}")


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    states: np.ndarray
    inputs: np.ndarray
    controller_schedule: tuple[str, ...]
    target: np.ndarray
    realized_risk: RiskProfile | None = None

    def __post_init__(self):
        if self.states.shape[0] != self.inputs.shape[0] + 1:
            raise ValueError("states must have one more row than inputs")

    @property
    def T(self) -> int:
        return self.inputs.shape[0]

    @property
    def final_distance(self) -> float:
        return float(np.linalg.norm(self.states[-1, :2] - self.target[:2]))

    def with_risk(self, profile: RiskProfile) -> "TrajectoryRecord":
        return replace(self, realized_risk=profile)

    def to_csv(self) -> str:
        n, m = self.states.shape[1], self.inputs.shape[1]
        buf = io.StringIO()
        buf.write(",".join(["k", "controller"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)]) + "\n")
        for k in range(self.states.shape[0]):
            u = self.inputs[k] if k < self.T else np.full(m, np.nan)
            ctrl = self.controller_schedule[k] if k < self.T else ""
            vals = [repr(float(v)) for v in self.states[k]] + ["" if np.isnan(v) else repr(float(v)) for v in u]
            buf.write(",".join([str(k), ctrl] + vals) + "\n")
        return buf.getvalue()


def simulate(
    model: LinearModel | Sequence[LinearModel],
    gains,
    x0,
    T: int,
    wind: WindSampler | None = None,
    seed: int = 0,
    target=None,
    labels: Sequence[str] | None = None,
) -> TrajectoryRecord:
    """Roll out ``x+ = A x + B u + Bw w`` with ``u = -K (x - target)``.

    ``model`` and ``gains`` may each be a single object or a per-step
    sequence of length ``T`` (a hazard onset switches the dynamics, a
    controller switch changes the gain). Wind is drawn only on steps whose
    model carries a disturbance set.
    """
    models = list(model) if isinstance(model, (list, tuple)) else [model] * T
    Ks = list(gains) if isinstance(gains, (list, tuple)) else [gains] * T
    if len(models) != T or len(Ks) != T:
        raise ValueError("per-step models and gains must have length T")
    labels = tuple(labels) if labels is not None else tuple("K" for _ in range(T))
    x = np.asarray(x0, dtype=float).copy()
    n = x.shape[0]
    target = make_target(n, 0.0) if target is None else np.asarray(target, dtype=float)
    rng = np.random.default_rng(seed)
    states = [x.copy()]
    inputs = []
    for k in range(T):
        M, K = models[k], np.asarray(Ks[k], dtype=float)
        if M.time_domain != "discrete":
            raise ValueError("simulate needs discrete-time models")
        if K.shape != (M.B.shape[1], n):
            raise ValueError(f"gain shape {K.shape} inconsistent with model")
        u = -K @ (x - target)
        x = M.A @ x + M.B @ u
        if wind is not None and M.W is not None:
            x = x + M.Bw @ wind.sample(rng)
        states.append(x.copy())
        inputs.append(u)
    m = models[0].B.shape[1]
    return TrajectoryRecord(
        np.array(states), np.array(inputs).reshape(T, m), labels, target
    )


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class MetricRow:
    risk_reduction_pct: float
    distance_change_pct: float
    degenerate: bool = False


def percent_reduction(base: float, cand: float) -> tuple[float, bool]:
    if base == 0.0:
        return 0.0, True
    return (base - cand) / base * 100.0, False


def percent_change(base: float, cand: float) -> tuple[float, bool]:
    if base == 0.0:
        return 0.0, True
    return (cand - base) / base * 100.0, False


def compute_metrics(lqr_rec: TrajectoryRecord, cand: TrajectoryRecord, k_start: int = 1) -> MetricRow:
    """Risk reduction and distance change of ``cand`` relative to the LQR record.

    ``k_start`` is the 1-based step of each record's risk profile from which
    the risk-to-go is taken.
    """
    if lqr_rec.T != cand.T:
        raise ValueError("records cover different horizons")
    rtg_l = risk_to_go(lqr_rec.realized_risk, k_start)
    rtg_c = risk_to_go(cand.realized_risk, k_start)
    red, d1 = percent_reduction(rtg_l, rtg_c)
    chg, d2 = percent_change(lqr_rec.final_distance, cand.final_distance)
    return MetricRow(red, chg, d1 or d2)


# ---------------------------------------------------------------- setup


@dataclass(frozen=True, eq=False)
class ExperimentSetup:
    """Models, gains, maps and thresholds shared by all flights."""

    config: ModelConfig
    maps: dict[str, LinearFormPoly]
    nominal: LinearModel
    K_nominal: np.ndarray
    cause_models: dict[str, LinearModel]
    cause_gains: dict[str, np.ndarray]
    X0: Zonotope
    target: np.ndarray
    solver: SolverOptions = field(default_factory=SolverOptions)
    online_half_width: float = ONLINE_HALF_WIDTH
    clip_wind: bool = True
    online_thresholds: str = "nominal-and-offline"

    @classmethod
    def build(
        cls,
        config: ModelConfig,
        maps: dict[str, LinearFormPoly],
        x0_half_width: float = X0_HALF_WIDTH,
        solver: SolverOptions | None = None,
        causes: Sequence[str] | None = None,
        online_half_width: float = ONLINE_HALF_WIDTH,
        clip_wind: bool = True,
        online_thresholds: str = "nominal-and-offline",
    ) -> "ExperimentSetup":
        if online_thresholds not in ONLINE_THRESHOLD_MODES:
            raise ValueError(f"unknown online threshold mode {online_thresholds!r}")
        p = config.params
        cont = build_nominal(p)
        nominal = discretize(cont, p.dt)
        all_causes = config.causes()
        names = list(all_causes) if causes is None else list(causes)
        models, gains = {}, {}
        for name in names:
            m = discretize(apply_hazard(cont, all_causes[name]), p.dt)
            models[name] = m
            gains[name] = lqr(m)
        n = nominal.n
        return cls(
            config=config,
            maps=dict(maps),
            nominal=nominal,
            K_nominal=lqr(nominal),
            cause_models=models,
            cause_gains=gains,
            X0=planar_box(n, START_XY, x0_half_width),
            target=make_target(n),
            solver=solver or SolverOptions(),
            online_half_width=online_half_width,
            clip_wind=clip_wind,
            online_thresholds=online_thresholds,
        )

    @property
    def T(self) -> int:
        return self.config.T

    def wind(self) -> WindSampler:
        return WindSampler.from_config(self.config, clip=self.clip_wind)

    def reach_profile(self, model: LinearModel, K, X0: Zonotope, T: int, poly: LinearFormPoly) -> RiskProfile:
        seq = reach.propagate(closed_loop(model, K), X0, model.disturbance_set(), T)
        return profile_for_sets(poly, seq.projected)

    def thresholds(self, poly: LinearFormPoly, X0: Zonotope | None = None, T: int | None = None) -> RiskThresholds:
        """Per-step risk of the nominal LQR loop, used as ``r_k``."""
        X0 = self.X0 if X0 is None else X0
        T = self.T if T is None else T
        prof = self.reach_profile(self.nominal, self.K_nominal, X0, T, poly)
        return RiskThresholds.from_per_step(prof.per_step)

    def problem(
        self,
        cause: str,
        map_name: str,
        X0: Zonotope | None = None,
        T: int | None = None,
        thresholds: RiskThresholds | None = None,
    ) -> ProblemSpec:
        poly = self.maps[map_name]
        X0 = self.X0 if X0 is None else X0
        if thresholds is None:
            thresholds = self.thresholds(poly, X0, T)
        return ProblemSpec(self.cause_models[cause], self.cause_gains[cause], X0, poly, thresholds)

    def online_problem(self, cause: str, map_name: str, X_on: Zonotope, T_rest: int, K_offline) -> ProblemSpec:
        """Re-solve from the state at hazard onset over the remaining steps.

        The nominal-loop thresholds are recomputed from ``X_on``. In
        ``nominal-and-offline`` mode each step is additionally capped by the
        risk the precomputed offline controller would incur from the same
        set, so switching to the online gain never adds risk over switching
        to the offline one.
        """
        poly = self.maps[map_name]
        r = self.thresholds(poly, X_on, T_rest).per_step
        if self.online_thresholds == "nominal-and-offline":
            off = self.reach_profile(self.cause_models[cause], K_offline, X_on, T_rest, poly).per_step
            r = np.minimum(r, off)
        return self.problem(cause, map_name, X_on, T_rest, RiskThresholds.from_per_step(r))

    def sample_x0(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform draw from the planar start box; other states at the target."""
        lo, hi = self.X0.interval_hull()
        x = self.target.copy()
        x[:2] = rng.uniform(lo[:2], hi[:2])
        return x


# ---------------------------------------------------------------- reports


@dataclass(frozen=True)
class ReportRow:
    """Raw per-flight values for one (cause, map, controller) cell.

    Percentages are recomputed from the raw tuples on every access.
    """

    cause: str
    map: str
    controller: str
    status: str
    rtg_lqr: tuple[float, ...] = ()
    rtg_candidate: tuple[float, ...] = ()
    dist_lqr: tuple[float, ...] = ()
    dist_candidate: tuple[float, ...] = ()
    runtimes: tuple[float, ...] = ()
    n_failed: int = 0

    def _pct(self, fn, base, cand) -> tuple[float, bool]:
        vals = [fn(b, c) for b, c in zip(base, cand)]
        if not vals:
            return float("nan"), True
        return float(np.mean([v for v, _ in vals])), any(d for _, d in vals)

    @property
    def risk_reduction_pct(self) -> float:
        return self._pct(percent_reduction, self.rtg_lqr, self.rtg_candidate)[0]

    @property
    def distance_change_pct(self) -> float:
        return self._pct(percent_change, self.dist_lqr, self.dist_candidate)[0]

    @property
    def degenerate(self) -> bool:
        return self._pct(percent_reduction, self.rtg_lqr, self.rtg_candidate)[1]

    @property
    def mean_rtg_lqr(self) -> float:
        return float(np.mean(self.rtg_lqr)) if self.rtg_lqr else float("nan")

    @property
    def mean_rtg_candidate(self) -> float:
        return float(np.mean(self.rtg_candidate)) if self.rtg_candidate else float("nan")

    def runtime_stats(self) -> dict:
        if not self.runtimes:
            return {"avg": None, "max": None, "std": None}
        r = np.asarray(self.runtimes)
        return {"avg": float(r.mean()), "max": float(r.max()), "std": float(r.std())}

    def to_dict(self) -> dict:
        return {
            "cause": self.cause,
            "map": self.map,
            "controller": self.controller,
            "status": self.status,
            "risk_reduction_pct": self.risk_reduction_pct,
            "distance_change_pct": self.distance_change_pct,
            "degenerate": self.degenerate,
            "mean_rtg_lqr": self.mean_rtg_lqr,
            "mean_rtg_candidate": self.mean_rtg_candidate,
            "n_flights": len(self.rtg_candidate),
            "n_failed": self.n_failed,
            "runtime_seconds": self.runtime_stats(),
            "raw": {
                "rtg_lqr": list(self.rtg_lqr),
                "rtg_candidate": list(self.rtg_candidate),
                "dist_lqr": list(self.dist_lqr),
                "dist_candidate": list(self.dist_candidate),
                "runtimes": list(self.runtimes),
            },
        }


@dataclass(frozen=True)
class ExperimentReport:
    kind: str
    rows: tuple[ReportRow, ...]
    seed: int
    n_flights: int

    def row(self, cause: str, map_name: str, controller: str) -> ReportRow:
        for r in self.rows:
            if (r.cause, r.map, r.controller) == (cause, map_name, controller):
                return r
        raise KeyError((cause, map_name, controller))

    def to_dict(self) -> dict:
        return {
            "experiment": self.kind,
            "seed": self.seed,
            "n_flights": self.n_flights,
            "rows": [r.to_dict() for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_markdown(self) -> str:
        def fmt(v, spec="{:.2f}"):
            return "n/a" if v is None or (isinstance(v, float) and np.isnan(v)) else spec.format(v)

        lines = [
            "| cause | map | controller | status | risk reduction % | distance change % | mean rtg LQR | mean rtg controller |",
            "|---|---|---|---|---|---|---|---|",
        ]
        for r in self.rows:
            lines.append(
                f"| {r.cause} | {r.map} | {r.controller} | {r.status} | {fmt(r.risk_reduction_pct)} | "
                f"{fmt(r.distance_change_pct)} | {fmt(r.mean_rtg_lqr, '{:.5f}')} | {fmt(r.mean_rtg_candidate, '{:.5f}')} |"
            )
        timed = [r for r in self.rows if r.runtimes]
        if timed:
            lines += ["", "| cause | map | controller | avg s | max s | std s |", "|---|---|---|---|---|---|"]
            for r in timed:
                st = r.runtime_stats()
                lines.append(
                    f"| {r.cause} | {r.map} | {r.controller} | {fmt(st['avg'], '{:.3f}')} | "
                    f"{fmt(st['max'], '{:.3f}')} | {fmt(st['std'], '{:.3f}')} |"
                )
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- experiments


def solve_offline(setup: ExperimentSetup, cause: str, map_name: str) -> Solution:
    return solve(setup.problem(cause, map_name), setup.solver)


def _usable(sol: Solution | None) -> bool:
    return sol is not None and sol.ok


def run_offline_experiment(
    setup: ExperimentSetup,
    seed: int = 0,
    n_flights: int = 1,
    solutions: dict | None = None,
) -> tuple[ExperimentReport, dict]:
    """Pre-flight hazard: LQR versus the offline risk-bounded controller.

    Risk is the starting risk-to-go over the reach sets from ``X0``; the
    distance comes from simulated flights sharing start state and wind seed.
    Returns the report and the solutions keyed by ``(cause, map)``.
    """
    solutions = dict(solutions or {})
    rows = []
    wind = setup.wind()
    for cause, model in setup.cause_models.items():
        K_c = setup.cause_gains[cause]
        for map_name, poly in setup.maps.items():
            key = (cause, map_name)
            if key not in solutions:
                try:
                    solutions[key] = solve_offline(setup, cause, map_name)
                except DegenerateProblemError as exc:
                    log.warning("offline %s/%s: %s", cause, map_name, exc)
                    solutions[key] = None
            sol = solutions[key]
            rtg_l = risk_to_go(setup.reach_profile(model, K_c, setup.X0, setup.T, poly), 1)
            if not _usable(sol):
                status = "degenerate" if sol is None else sol.status
                rows.append(ReportRow(cause, map_name, "PRR-offline", status, n_failed=n_flights))
                continue
            rtg_c = risk_to_go(setup.reach_profile(model, sol.K_prime, setup.X0, setup.T, poly), 1)
            d_l, d_c = [], []
            for i in range(n_flights):
                fseed = seed + i
                x0 = setup.sample_x0(np.random.default_rng(fseed))
                d_l.append(simulate(model, K_c, x0, setup.T, wind, fseed, setup.target).final_distance)
                d_c.append(simulate(model, sol.K_prime, x0, setup.T, wind, fseed, setup.target).final_distance)
            rows.append(
                ReportRow(
                    cause,
                    map_name,
                    "PRR-offline",
                    sol.status,
                    rtg_lqr=(rtg_l,) * n_flights,
                    rtg_candidate=(rtg_c,) * n_flights,
                    dist_lqr=tuple(d_l),
                    dist_candidate=tuple(d_c),
                    runtimes=(sol.runtime,),
                )
            )
    return ExperimentReport("offline", tuple(rows), seed, n_flights), solutions


@dataclass(frozen=True)
class FlightOutcome:
    flight: int
    onset: int
    rtg: dict
    dist: dict
    online_status: str
    online_runtime: float
    records: dict | None = None


def online_flight(
    setup: ExperimentSetup,
    cause: str,
    map_name: str,
    offline: Solution,
    flight: int,
    seed: int,
    keep_records: bool = False,
) -> FlightOutcome:
    """One in-flight hazard: nominal LQR up to ``k'``, then three continuations."""
    fseed = seed + flight
    rng = np.random.default_rng(fseed)
    T = setup.T
    x0 = setup.sample_x0(rng)
    onset = int(rng.integers(1, T - 1))  # k' in 1..T-2
    model = setup.cause_models[cause]
    poly = setup.maps[map_name]
    wind = setup.wind()

    pre = simulate(setup.nominal, setup.K_nominal, x0, onset, None, fseed, setup.target, ["LQR"] * onset)
    x_on = pre.states[-1]
    rest = T - onset
    # small box around the actual error state; the other states are known exactly
    X_on = Zonotope(x_on - setup.target, planar_box(model.n, (0.0, 0.0), setup.online_half_width).generators)
    wind_seed = int(rng.integers(2**31))

    t0 = time.perf_counter()
    try:
        sol = solve(setup.online_problem(cause, map_name, X_on, rest, offline.K_prime), setup.solver)
        status, K_on = sol.status, (sol.K_prime if sol.ok else None)
    except DegenerateProblemError:
        status, K_on = "degenerate", None
    runtime = time.perf_counter() - t0

    branches = {"LQR": setup.cause_gains[cause], "PRR-offline": offline.K_prime}
    if K_on is not None:
        branches["PRR-online"] = K_on
    rtg, dist, records = {}, {}, {}
    for name, K in branches.items():
        post = simulate(model, K, x_on, rest, wind, wind_seed, setup.target, [name] * rest)
        prof = setup.reach_profile(model, K, X_on, rest, poly)
        rtg[name] = risk_to_go(prof, 1)
        dist[name] = post.final_distance
        if keep_records:
            full = TrajectoryRecord(
                np.vstack([pre.states, post.states[1:]]),
                np.vstack([pre.inputs, post.inputs]),
                pre.controller_schedule + post.controller_schedule,
                setup.target,
                prof,
            )
            records[name] = full
    return FlightOutcome(flight, onset, rtg, dist, status, runtime, records if keep_records else None)


def _flight_job(args):
    return online_flight(*args)


def run_online_experiment(
    setup: ExperimentSetup,
    n_flights: int,
    seed: int = 0,
    offline: dict | None = None,
    workers: int = 1,
) -> tuple[ExperimentReport, dict]:
    """In-flight hazards at random onsets; returns the report and raw outcomes."""
    offline = dict(offline or {})
    rows, outcomes = [], {}
    for cause in setup.cause_models:
        for map_name in setup.maps:
            key = (cause, map_name)
            if key not in offline:
                offline[key] = solve_offline(setup, cause, map_name)
            off = offline[key]
            if not _usable(off):
                for ctrl in ("PRR-offline", "PRR-online"):
                    rows.append(ReportRow(cause, map_name, ctrl, f"offline {off.status}", n_failed=n_flights))
                continue
            jobs = [(setup, cause, map_name, off, i, seed) for i in range(n_flights)]
            if workers > 1:
                with ProcessPoolExecutor(workers) as ex:
                    res = list(ex.map(_flight_job, jobs))
            else:
                res = [_flight_job(j) for j in jobs]
            outcomes[key] = res
            good = [r for r in res if "PRR-online" in r.rtg]
            failed = len(res) - len(good)
            if failed:
                log.warning("%s/%s: %d online solve(s) failed", cause, map_name, failed)
            for ctrl in ("PRR-offline", "PRR-online"):
                rows.append(
                    ReportRow(
                        cause,
                        map_name,
                        ctrl,
                        "ok" if not failed else f"{failed} failed",
                        rtg_lqr=tuple(r.rtg["LQR"] for r in good),
                        rtg_candidate=tuple(r.rtg[ctrl] for r in good),
                        dist_lqr=tuple(r.dist["LQR"] for r in good),
                        dist_candidate=tuple(r.dist[ctrl] for r in good),
                        runtimes=tuple(r.online_runtime for r in good) if ctrl == "PRR-online" else (),
                        n_failed=failed,
                    )
                )
    return ExperimentReport("online", tuple(rows), seed, n_flights), outcomes
