"""Command-line entry point: ``prreach <command> [options]``.

Exit codes: 0 success, 1 I/O error, 2 usage error, 3 infeasible or
numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import reach
from .dynamics import LQRConvergenceError, ModelConfig, closed_loop
from .geometry import GeometryError, Zonotope
from .hazard import (
    SYNTH_KINDS,
    HazardDataError,
    LinearFormPoly,
    bundled_map_specs,
    bundled_maps,
    fit_poly,
    grid_from_spec,
    load_grid,
    synth_grid,
)
from .optimizer import DegenerateProblemError, SolverOptions, solve, verify
from .risk import RiskThresholds, risk_to_go
from .sim import (
    ONLINE_THRESHOLD_MODES,
    ExperimentSetup,
    planar_box,
    run_offline_experiment,
    run_online_experiment,
    simulate,
)

log = logging.getLogger("prreach")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_FAIL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class NumericalFailure(Exception):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    maps: dict = field(default_factory=dict)
    x0_half_width: float = 0.5
    online_half_width: float = 0.05
    online_thresholds: str = "nominal-and-offline"
    solver: SolverOptions = field(default_factory=SolverOptions)
    flights: int = 20
    seed: int = 1
    output_dir: str = "prreach-out"

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        if "seed" not in d:
            raise UsageError("config must set 'seed'")
        kw = dict(d)
        kw["model"] = ModelConfig.from_dict(d.get("model", {}))
        solver_keys = {f.name for f in fields(SolverOptions)}
        bad = set(d.get("solver", {})) - solver_keys
        if bad:
            raise UsageError(f"unknown solver options: {', '.join(sorted(bad))}")
        kw["solver"] = SolverOptions(**d.get("solver", {}))
        if kw.get("online_thresholds", "nominal-and-offline") not in ONLINE_THRESHOLD_MODES:
            raise UsageError(f"online_thresholds must be one of {ONLINE_THRESHOLD_MODES}")
        maps = {}
        for name, p in d.get("maps", {}).items():
            path = Path(p)
            if base is not None and not path.is_absolute():
                path = base / path
            if not path.exists():
                raise FileNotFoundError(f"map file not found: {path}")
            maps[name] = str(path)
        kw["maps"] = maps
        return cls(**kw)

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            text = resources.files("prreach").joinpath("data", "config.json").read_text(encoding="utf-8")
            return cls.from_dict(json.loads(text))
        p = Path(path)
        try:
            d = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{p}: invalid JSON ({exc})") from exc
        return cls.from_dict(d, base=p.parent)

    def load_maps(self) -> dict[str, LinearFormPoly]:
        if not self.maps:
            return bundled_maps()
        return {name: LinearFormPoly.load(p) for name, p in self.maps.items()}

    def setup(self, maps=None, causes=None) -> ExperimentSetup:
        return ExperimentSetup.build(
            self.model,
            self.load_maps() if maps is None else maps,
            x0_half_width=self.x0_half_width,
            solver=self.solver,
            causes=causes,
            online_half_width=self.online_half_width,
            online_thresholds=self.online_thresholds,
        )


def _write(path, text: str) -> None:
    p = Path(path)
    if p.parent and not p.parent.exists():
        p.parent.mkdir(parents=True)
    with open(p, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _resolve_map(cfg: RunConfig, spec: str) -> tuple[str, LinearFormPoly]:
    """A map argument is either a bundled/configured map name or a JSON path."""
    maps = cfg.load_maps()
    if spec in maps:
        return spec, maps[spec]
    p = Path(spec)
    if p.suffix == ".json" or p.exists():
        if not p.exists():
            raise FileNotFoundError(f"map file not found: {p}")
        return p.stem, LinearFormPoly.load(p)
    raise UsageError(f"unknown map {spec!r}; known maps: {', '.join(maps)}")


def _check_cause(setup: ExperimentSetup, cause: str) -> None:
    if cause not in setup.cause_models:
        raise UsageError(f"unknown cause {cause!r}; choose from {', '.join(setup.cause_models)}")


def _online_start(setup: ExperimentSetup, k: int) -> Zonotope:
    """Small box around the nominal flight's error state after ``k`` steps."""
    if not 1 <= k <= setup.T - 1:
        raise UsageError(f"--online-from must lie in 1..{setup.T - 1}")
    x0 = setup.target.copy()
    x0[:2] = setup.X0.center[:2]
    rec = simulate(setup.nominal, setup.K_nominal, x0, k, None, 0, setup.target)
    err = rec.states[-1] - setup.target
    return Zonotope(err, planar_box(setup.nominal.n, (0.0, 0.0), setup.online_half_width).generators)


# ---------------------------------------------------------------- commands


def cmd_synth_hazard(args) -> int:
    if args.preset:
        specs = bundled_map_specs()
        if args.preset not in specs:
            raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(specs)}")
        grid = grid_from_spec(specs[args.preset])
    else:
        params = json.loads(args.params) if args.params else None
        grid = synth_grid(args.kind, params, seed=args.seed, bounds=args.bounds, spacing=args.spacing, pad=args.pad)
    grid.save_csv(args.out)
    print(f"wrote {len(grid)} cells to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    grid = load_grid(args.grid)
    poly, report = fit_poly(grid, M=args.M, terms_per_degree=args.terms_per_degree, seed=args.seed)
    poly.save(args.out)
    rep = report.to_dict() | {"n_clamped": grid.n_clamped}
    report_path = args.report or str(Path(args.out).with_suffix(".report.json"))
    _write(report_path, json.dumps(rep, indent=2) + "\n")
    print(f"rmse {report.rmse:.6g}  max error {report.max_abs_error:.6g}  -> {args.out}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    cfg = RunConfig.load(args.config)
    map_name, poly = _resolve_map(cfg, args.map)
    setup = cfg.setup({map_name: poly})
    _check_cause(setup, args.cause)
    X0, T = setup.X0, setup.T
    if args.online_from is not None:
        X0 = _online_start(setup, args.online_from)
        T = setup.T - args.online_from
    if args.thresholds:
        r = np.asarray(json.loads(Path(args.thresholds).read_text(encoding="utf-8")), dtype=float)
        if r.shape != (T,):
            raise UsageError(f"threshold file must list {T} values")
        thresholds = RiskThresholds.from_per_step(r)
    else:
        base = setup.thresholds(poly, X0, T).per_step
        thresholds = RiskThresholds.from_per_step(np.clip(base * args.threshold_scale, 0.0, 1.0))
    spec = setup.problem(args.cause, map_name, X0, T, thresholds)
    try:
        sol = solve(spec, cfg.solver)
    except DegenerateProblemError as exc:
        raise NumericalFailure(str(exc)) from exc
    out = sol.to_dict() | {
        "cause": args.cause,
        "map": map_name,
        "online_from": args.online_from,
        "thresholds": thresholds.per_step.tolist(),
    }
    text = json.dumps(out, indent=2) + "\n"
    if args.out:
        _write(args.out, text)
    else:
        sys.stdout.write(text)
    print(f"status {sol.status}  objective {sol.objective:.6g}  horizon {sol.horizon}", file=sys.stderr)
    return EXIT_OK if sol.ok else EXIT_FAIL


def _load_gain(path: str) -> np.ndarray:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    K = d["K_prime"] if isinstance(d, dict) and "K_prime" in d else d
    return np.asarray(K, dtype=float)


def cmd_verify(args) -> int:
    cfg = RunConfig.load(args.config)
    map_name, poly = _resolve_map(cfg, args.map)
    setup = cfg.setup({map_name: poly})
    _check_cause(setup, args.cause)
    spec = setup.problem(args.cause, map_name)
    K = setup.cause_gains[args.cause] if args.gain is None else _load_gain(args.gain)
    res = verify(spec, K)
    out = {
        "cause": args.cause,
        "map": map_name,
        "feasible": res.feasible,
        "max_excess": res.max_excess,
        "risk_to_go": risk_to_go(res.profile, 1),
        "per_step_risk": res.profile.per_step.tolist(),
        "thresholds": spec.thresholds.per_step.tolist(),
    }
    sys.stdout.write(json.dumps(out, indent=2) + "\n")
    return EXIT_OK if res.feasible else EXIT_FAIL


def cmd_reach_dump(args) -> int:
    cfg = RunConfig.load(args.config)
    setup = cfg.setup({})
    _check_cause(setup, args.cause)
    model = setup.cause_models[args.cause]
    K = setup.cause_gains[args.cause] if args.gain is None else _load_gain(args.gain)
    seq = reach.propagate(closed_loop(model, K), setup.X0, model.disturbance_set(), setup.T)
    _write(args.out, seq.to_jsonl())
    print(f"wrote {len(seq)} reach sets to {args.out}")
    return EXIT_OK


def _emit_plot_data(out: Path, setup: ExperimentSetup, solutions: dict) -> None:
    """Heatmap grids, reach polygons and trajectories for external plotting."""
    plots = out / "plot"
    plots.mkdir(parents=True, exist_ok=True)
    specs = bundled_map_specs()
    for name in setup.maps:
        if name in specs:
            grid_from_spec(specs[name]).save_csv(plots / f"heatmap_{name}.csv")
    for (cause, map_name), sol in solutions.items():
        model = setup.cause_models[cause]
        gains = {"lqr": setup.cause_gains[cause]}
        if sol is not None and sol.ok:
            gains["prr_offline"] = sol.K_prime
        x0 = setup.target.copy()
        x0[:2] = setup.X0.center[:2]
        for label, K in gains.items():
            seq = reach.propagate(closed_loop(model, K), setup.X0, model.disturbance_set(), setup.T)
            _write(plots / f"reach_{cause}_{map_name}_{label}.jsonl", seq.to_jsonl())
            rec = simulate(model, K, x0, setup.T, setup.wind(), 0, setup.target, [label] * setup.T)
            _write(plots / f"trajectory_{cause}_{map_name}_{label}.csv", rec.to_csv())


def cmd_experiment(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.flights is not None:
        cfg.flights = args.flights
    out = Path(args.out or cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("", encoding="utf-8")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    causes = args.causes.split(",") if args.causes else None
    setup = cfg.setup(causes=causes)
    if args.mode == "offline":
        report, solutions = run_offline_experiment(setup, seed=cfg.seed)
    else:
        _, solutions = run_offline_experiment(setup, seed=cfg.seed)
        report, _ = run_online_experiment(setup, cfg.flights, seed=cfg.seed, offline=solutions, workers=args.workers)
    (out / f"{args.mode}_report.json").write_text(report.to_json(), encoding="utf-8")
    (out / f"{args.mode}_report.md").write_text(report.to_markdown(), encoding="utf-8")
    for key, sol in solutions.items():
        if sol is not None:
            _write(out / "solutions" / f"{key[0]}_{key[1]}.json", json.dumps(sol.to_dict(), indent=2) + "\n")
    if not args.no_plot_data:
        _emit_plot_data(out, setup, solutions)
    sys.stdout.write(report.to_markdown())
    return EXIT_OK


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="prreach", description="Reachability-based risk assessment and risk-bounded control")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-hazard", help="write a synthetic hazard grid (CSV)")
    s.add_argument("--kind", choices=SYNTH_KINDS, default="ramp")
    s.add_argument("--preset", help="bundled map name (overrides --kind/--params)")
    s.add_argument("--params", help="generator parameters as JSON")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--bounds", type=float, nargs=4, default=(0.0, 10.0, 0.0, 10.0), metavar=("XMIN", "XMAX", "YMIN", "YMAX"))
    s.add_argument("--spacing", type=float, default=1.0)
    s.add_argument("--pad", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_hazard)

    s = sub.add_parser("fit", help="fit a sum of powers of linear forms to a grid")
    s.add_argument("--grid", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.add_argument("-M", "--M", type=int, default=3)
    s.add_argument("--terms-per-degree", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("optimize", help="solve for a risk-bounded controller")
    s.add_argument("--cause", required=True)
    s.add_argument("--map", required=True, help="map name or fitted polynomial JSON")
    s.add_argument("--config")
    s.add_argument("--online-from", type=int, metavar="K")
    s.add_argument("--threshold-scale", type=float, default=1.0, help="multiply the nominal thresholds")
    s.add_argument("--thresholds", help="JSON list of per-step thresholds")
    s.add_argument("--out")
    s.set_defaults(func=cmd_optimize)

    s = sub.add_parser("verify", help="re-check a gain against the nominal thresholds")
    s.add_argument("--cause", required=True)
    s.add_argument("--map", required=True)
    s.add_argument("--gain", help="Solution JSON or gain matrix JSON (default: the cause's LQR gain)")
    s.add_argument("--config")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("experiment", help="run the offline or online experiment")
    s.add_argument("mode", choices=("offline", "online"))
    s.add_argument("--flights", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--causes", help="comma-separated subset of causes")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--config")
    s.add_argument("--out")
    s.add_argument("--no-plot-data", action="store_true")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("reach-dump", help="write projected reach polygons as JSON lines")
    s.add_argument("--cause", required=True)
    s.add_argument("--gain")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reach_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"prreach: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, PermissionError, IsADirectoryError, HazardDataError, OSError) as exc:
        print(f"prreach: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalFailure, LQRConvergenceError, GeometryError, np.linalg.LinAlgError) as exc:
        print(f"prreach: numerical failure: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as exc:
        print(f"prreach: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
