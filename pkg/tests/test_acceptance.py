"""Acceptance suite: one test per criterion, summarised at the end of the run.

The experiment fixtures are module-scoped so the offline solves are shared by
criteria 5, 6, 7 and 10. Expect roughly five minutes on one core.
"""

import math
import time

import numpy as np
import pytest
from scipy.optimize import linprog
from scipy.spatial import ConvexHull

from prreach.dynamics import LinearModel, ModelConfig, closed_loop, dare_residual, lqr, solve_dare
from prreach.geometry import Simplex, Zonotope, box, signed_area, vertices_2d, volume
from prreach.hazard import LinearFormPoly, bundled_maps
from prreach.optimizer import ProblemSpec, SolverOptions, recover_gain, recovery_residual, solve, verify
from prreach.reach import propagate
from prreach.risk import RiskThresholds, integrate_term_over_simplex
from prreach.sim import ExperimentSetup, run_offline_experiment, run_online_experiment, simulate

N_ONLINE_FLIGHTS = 20
SEED = 1


@pytest.fixture(scope="module")
def setup():
    return ExperimentSetup.build(ModelConfig(), bundled_maps())


@pytest.fixture(scope="module")
def offline(setup):
    t0 = time.perf_counter()
    report, solutions = run_offline_experiment(setup, seed=SEED)
    return report, solutions, time.perf_counter() - t0


@pytest.fixture(scope="module")
def online(setup, offline):
    t0 = time.perf_counter()
    report, outcomes = run_online_experiment(setup, N_ONLINE_FLIGHTS, seed=SEED, offline=offline[1])
    return report, outcomes, time.perf_counter() - t0


@pytest.mark.criterion(1)
def test_criterion_01_simplex_integration(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    std = Simplex(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    e1 = abs(integrate_term_over_simplex([1.0, 0.0, 0.0], 1, std) - 1 / 6)
    e2 = abs(integrate_term_over_simplex([1.0, 0.0, 0.0], 2, std) - 1 / 12)
    worst = 0.0
    for _ in range(50):
        V = rng.uniform(-3.0, 3.0, size=(3, 2))
        l = rng.normal(size=3)
        m = int(rng.integers(1, 4))
        # keep the form away from zero on the simplex so a relative error is meaningful
        a = V @ l[:2] + l[2]
        l[2] += -a.min() + rng.uniform(1.0, 2.0) * (a.max() - a.min() + 0.1)
        exact = integrate_term_over_simplex(l, m, Simplex(V))
        w = rng.dirichlet(np.ones(3), size=100_000)
        vals = ((w @ V) @ l[:2] + l[2]) ** m
        area = 0.5 * abs(np.linalg.det(V[1:] - V[0]))
        worst = max(worst, abs(area * vals.mean() - exact) / abs(exact))
    runtime = time.perf_counter() - t0
    record_property("detail", f"max MC rel err {worst:.3%} over 50 cases; analytic errs {e1:.1e}, {e2:.1e}; {runtime:.1f}s")
    assert e1 <= 1e-12 and e2 <= 1e-12
    assert worst <= 0.01
    assert runtime < 30


@pytest.mark.criterion(2)
def test_criterion_02_zonotope_volume(record_property):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = worst_hull = 0.0
    for _ in range(100):
        g = int(rng.integers(2, 5))
        Z = Zonotope(rng.normal(size=2), rng.normal(size=(2, g)))
        v = volume(Z)
        shoelace = abs(signed_area(vertices_2d(Z).vertices))
        worst = max(worst, abs(v - shoelace) / shoelace)
        corners = Z.center + (Z.generators @ (2 * ((np.arange(2**g)[:, None] >> np.arange(g)) & 1) - 1).T).T
        worst_hull = max(worst_hull, abs(v - ConvexHull(corners).volume) / v)
    runtime = time.perf_counter() - t0
    record_property("detail", f"max rel diff vs shoelace {worst:.1e}, vs corner hull {worst_hull:.1e}; {runtime:.2f}s")
    assert worst <= 1e-9 and worst_hull <= 1e-9
    assert runtime < 5


@pytest.mark.criterion(3)
def test_criterion_03_lqr(record_property, setup):
    res = []
    for model in [setup.nominal, *setup.cause_models.values()]:
        n, m = model.B.shape
        P = solve_dare(model.A, model.B, np.eye(n), np.eye(m))
        res.append(dare_residual(model.A, model.B, np.eye(n), np.eye(m), P))
    scalar = LinearModel([[1.0]], [[1.0]], np.zeros((1, 0)), "discrete", 1.0)
    k_err = abs(lqr(scalar)[0, 0] - 2 / (1 + math.sqrt(5)))
    record_property("detail", f"max DARE residual {max(res):.1e} over nominal and 3 causes; scalar gain err {k_err:.1e}")
    assert max(res) <= 1e-9
    assert k_err <= 1e-9


@pytest.mark.criterion(4)
def test_criterion_04_gain_recovery(record_property, setup):
    rng = np.random.default_rng(4)
    worst_res = worst_trip = 0.0
    Bs = [setup.nominal.B, setup.cause_models["rotor"].B] + [rng.normal(size=(12, 4)) for _ in range(8)]
    for B in Bs:
        A = rng.normal(size=(12, 12))
        K = rng.normal(size=(4, 12))
        D = A - B @ rng.normal(size=(4, 12))
        worst_res = max(worst_res, recovery_residual(A, B, D, recover_gain(A, B, D)))
        worst_trip = max(worst_trip, np.linalg.norm(recover_gain(A, B, A - B @ K) - K))
    record_property("detail", f"max residual {worst_res:.1e}; max round-trip err {worst_trip:.1e}")
    assert worst_res <= 1e-8
    assert worst_trip <= 1e-9


@pytest.mark.criterion(5)
def test_criterion_05_constraint_guarantee(record_property, setup, offline):
    _, solutions, _ = offline
    checked, worst, lines = 0, -np.inf, []
    ok = True
    for (cause, map_name), sol in sorted(solutions.items()):
        lines.append(f"{cause}/{map_name}={sol.status}")
        if not sol.ok:
            continue
        spec = setup.problem(cause, map_name)
        v = verify(spec, sol.K_prime)
        excess = v.profile.per_step - spec.thresholds.per_step
        worst = max(worst, excess.max())
        ok &= bool(np.all(excess <= 1e-6))
        checked += 1
    record_property("detail", f"{checked}/6 solves verified, max excess {worst:.1e} ({', '.join(lines)})")
    assert checked == 6
    assert ok


@pytest.mark.criterion(6)
def test_criterion_06_offline_direction(record_property, offline):
    report, _, _ = offline
    margins = {}
    for row in report.rows:
        margins[f"{row.cause}/{row.map}"] = row.mean_rtg_lqr - row.mean_rtg_candidate
    record_property("detail", "rtg LQR - PRR-offline: " + ", ".join(f"{k} {v:.2e}" for k, v in margins.items()))
    assert len(margins) == 6
    assert all(v >= 1e-4 for v in margins.values())


@pytest.mark.criterion(7)
def test_criterion_07_online_ordering(record_property, online):
    report, outcomes, runtime = online
    parts, ok = [], True
    for (cause, map_name), flights in sorted(outcomes.items()):
        on = report.row(cause, map_name, "PRR-online")
        off = report.row(cause, map_name, "PRR-offline")
        m_on, m_off, m_lqr = on.mean_rtg_candidate, off.mean_rtg_candidate, off.mean_rtg_lqr
        ok &= len(on.rtg_candidate) > 0 and m_on <= m_off <= m_lqr
        parts.append(f"{cause}/{map_name} {m_on:.4f}<={m_off:.4f}<={m_lqr:.4f} ({on.n_failed} failed)")
    record_property("detail", f"{N_ONLINE_FLIGHTS} flights each, {runtime:.0f}s: " + "; ".join(parts))
    assert len(outcomes) == 6
    assert ok
    assert runtime < 30 * 60


def _in_zonotope(Z, x):
    n, g = Z.generators.shape
    cost = np.r_[np.zeros(g), 1.0]
    A_ub = np.block([[np.eye(g), -np.ones((g, 1))], [-np.eye(g), -np.ones((g, 1))]])
    res = linprog(
        cost, A_ub=A_ub, b_ub=np.zeros(2 * g), A_eq=np.c_[Z.generators, np.zeros(n)], b_eq=x - Z.center,
        bounds=(None, None), method="highs",
    )
    return res.status == 0 and res.x[-1] <= 1.0 + 1e-7


@pytest.mark.criterion(8)
def test_criterion_08_reach_soundness(record_property, setup):
    model = setup.cause_models["wind"]
    K = setup.cause_gains["wind"]
    T = setup.T
    seq = propagate(closed_loop(model, K), setup.X0, model.disturbance_set(), T, reduce_to=None)
    rng = np.random.default_rng(SEED)
    U = rng.normal(size=(256, 12))
    U = np.vstack([U / np.linalg.norm(U, axis=1, keepdims=True), np.eye(12), -np.eye(12)])
    worst_margin, lp_ok = -np.inf, True
    for flight in range(20):
        fseed = SEED + flight
        x0 = setup.sample_x0(np.random.default_rng(fseed))
        rec = simulate(model, K, x0, T, setup.wind(), fseed, setup.target)
        for k, Z in enumerate(seq.sets, start=1):
            e = rec.states[k] - setup.target
            h = U @ Z.center + np.abs(U @ Z.generators).sum(axis=1)
            worst_margin = max(worst_margin, float((U @ e - h).max()))
            lp_ok &= _in_zonotope(Z, e)
    record_property("detail", f"20 flights x {T} steps; max support excess {worst_margin:.2e}; LP membership {'all' if lp_ok else 'NOT all'}")
    assert worst_margin <= 1e-9
    assert lp_ok


@pytest.mark.criterion(9)
def test_criterion_09_optimizer_oracle(record_property):
    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    D0 = np.array([[0.9, 0.1], [-0.1, 0.85]])
    c, h = np.array([2.0, 1.0]), np.array([0.5, 0.5])
    poly = LinearFormPoly(((1, [0.05, 0.0, 0.1]), (2, [0.1, 0.0, 0.0])))
    model = LinearModel(A, np.eye(2), np.zeros((2, 0)), "discrete", 1.0)
    g = np.round(np.arange(-150, 151) * 0.01, 2)
    R1, R2 = np.meshgrid(g, g)
    cx = R1 * c[0] + R2 * c[1]
    mean_risk = 0.05 * cx + 0.1 + 0.01 * (cx**2 + ((R1 * h[0]) ** 2 + (R2 * h[1]) ** 2) / 3)
    dist = np.sqrt((R1 - D0[0, 0]) ** 2 + (R2 - D0[0, 1]) ** 2)
    rel = []
    for r in (0.17, 0.12):
        spec = ProblemSpec(model, A - D0, box(c, h), poly, RiskThresholds.from_per_step([r]))
        sol = solve(spec, SolverOptions(space="full"))
        grid = dist[mean_risk <= r].min()
        rel.append(abs(sol.objective - grid) / grid)
    record_property("detail", "rel gap to grid search: " + ", ".join(f"{v:.2%}" for v in rel))
    assert max(rel) <= 0.02


@pytest.mark.criterion(10)
def test_criterion_10_runtime(record_property, offline):
    _, solutions, total = offline
    times = [s.runtime for s in solutions.values()]
    record_property("detail", f"offline solves: max {max(times):.1f}s, mean {np.mean(times):.1f}s (limit 120s)")
    assert max(times) < 120
