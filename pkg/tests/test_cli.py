import json
import shutil
from importlib import resources

import pytest

from prreach.cli import RunConfig, UsageError, main


def data_path(name):
    return resources.files("prreach").joinpath("data", name)


@pytest.fixture()
def person_json(tmp_path):
    dst = tmp_path / "person.json"
    with resources.as_file(data_path("person.json")) as src:
        shutil.copy(src, dst)
    return dst


def test_synth_hazard_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["synth-hazard", "--kind", "ramp", "--out", str(a), "--seed", "7"]) == 0
    assert main(["synth-hazard", "--kind", "ramp", "--out", str(b), "--seed", "7"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert b"\r" not in a.read_bytes()


def test_synth_hazard_preset_matches_bundled_grid(tmp_path):
    out = tmp_path / "person.csv"
    assert main(["synth-hazard", "--preset", "person", "--out", str(out)]) == 0
    assert out.read_bytes() == data_path("person.csv").read_bytes()


def test_synth_hazard_usage_errors(tmp_path, capsys):
    assert main(["synth-hazard", "--kind", "spiral", "--out", str(tmp_path / "g.csv")]) == 2
    assert main(["synth-hazard", "--preset", "lake", "--out", str(tmp_path / "g.csv")]) == 2
    assert main([]) == 2
    assert main(["--help"]) == 0
    capsys.readouterr()


def test_fit_constant_grid(tmp_path):
    grid = tmp_path / "c.csv"
    main(["synth-hazard", "--kind", "constant", "--params", '{"value": 0.3}', "--out", str(grid)])
    out = tmp_path / "c.json"
    assert main(["fit", "--grid", str(grid), "--out", str(out)]) == 0
    report = json.loads((tmp_path / "c.report.json").read_text())
    assert report["rmse"] < 1e-12
    terms = json.loads(out.read_text())["terms"]
    assert sorted({t["m"] for t in terms}) == [1, 2, 3]


def test_fit_missing_file(tmp_path, capsys):
    missing = tmp_path / "nowhere.csv"
    assert main(["fit", "--grid", str(missing), "--out", str(tmp_path / "p.json")]) == 1
    assert str(missing) in capsys.readouterr().err


def test_fit_malformed_file(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y,value\n1,2\n", encoding="utf-8")
    assert main(["fit", "--grid", str(bad), "--out", str(tmp_path / "p.json")]) == 1
    assert "bad.csv" in capsys.readouterr().err


def test_optimize_online_records_horizon(tmp_path, person_json, capsys):
    out = tmp_path / "sol.json"
    code = main(["optimize", "--cause", "wind", "--map", str(person_json), "--online-from", "5", "--out", str(out)])
    d = json.loads(out.read_text())
    assert code == (0 if d["status"] in ("optimal", "feasible") else 3)
    assert d["horizon"] == 20
    assert d["online_from"] == 5
    assert len(d["per_step_risk"]) == 20
    assert d["map"] == "person"
    capsys.readouterr()


def test_optimize_infeasible_exit_code(tmp_path, capsys):
    # a constant positive map cannot be pushed below its value by any controller
    const = tmp_path / "const.json"
    const.write_text(json.dumps({"M": 1, "terms": [{"m": 1, "l": [0.0, 0.0, 0.2]}]}), encoding="utf-8")
    out = tmp_path / "sol.json"
    code = main(
        ["optimize", "--cause", "rotor", "--map", str(const), "--online-from", "20", "--threshold-scale", "0.5", "--out", str(out)]
    )
    assert code == 3
    assert json.loads(out.read_text())["status"] == "infeasible"
    capsys.readouterr()


def test_optimize_usage_errors(tmp_path, capsys):
    assert main(["optimize", "--cause", "hail", "--map", "person"]) == 2
    assert main(["optimize", "--cause", "wind", "--map", "lake"]) == 2
    assert main(["optimize", "--cause", "wind", "--map", str(tmp_path / "gone.json")]) == 1
    assert main(["optimize", "--cause", "wind", "--map", "person", "--online-from", "30"]) == 2
    capsys.readouterr()


def test_verify_and_reach_dump(tmp_path, capsys):
    # the hazard-cause LQR loop exceeds the nominal thresholds on the bundled maps
    assert main(["verify", "--cause", "rotor", "--map", "person"]) == 3
    d = json.loads(capsys.readouterr().out)
    assert d["feasible"] is False and d["max_excess"] > 0
    out = tmp_path / "r.jsonl"
    assert main(["reach-dump", "--cause", "wind", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 25
    assert len(json.loads(lines[0])["vertices"]) == 4
    capsys.readouterr()


def test_config_validation(tmp_path):
    base = json.loads(data_path("config.json").read_text())
    assert RunConfig.from_dict(base).seed == 1
    with pytest.raises(UsageError):
        RunConfig.from_dict({k: v for k, v in base.items() if k != "seed"})
    with pytest.raises(UsageError):
        RunConfig.from_dict(base | {"colour": "red"})
    with pytest.raises(UsageError):
        RunConfig.from_dict(base | {"solver": {"speed": 2}})
    with pytest.raises(FileNotFoundError):
        RunConfig.from_dict(base | {"maps": {"person": "missing.json"}}, base=tmp_path)


def test_config_with_relative_map_paths(tmp_path, person_json, capsys):
    cfg = json.loads(data_path("config.json").read_text()) | {"maps": {"crowd": "person.json"}}
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg), encoding="utf-8")
    assert set(RunConfig.load(str(path)).load_maps()) == {"crowd"}
    bad = tmp_path / "bad.json"
    bad.write_text("{", encoding="utf-8")
    assert main(["verify", "--cause", "wind", "--map", "person", "--config", str(bad)]) == 2
    capsys.readouterr()


def test_experiment_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x", encoding="utf-8")
    assert main(["experiment", "offline", "--out", str(blocker / "sub")]) == 1
    capsys.readouterr()


def test_experiment_offline_report_shape(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["experiment", "offline", "--out", str(out)]) == 0
    rep = json.loads((out / "offline_report.json").read_text())
    assert len(rep["rows"]) == 6
    assert {(r["cause"], r["map"]) for r in rep["rows"]} == {
        (c, m) for c in ("rotor", "sensor", "wind") for m in ("person", "building")
    }
    assert (out / "offline_report.md").read_text().startswith("| cause |")
    plots = out / "plot"
    assert (plots / "heatmap_person.csv").exists()
    assert (plots / "reach_wind_building_lqr.jsonl").exists()
    assert (plots / "trajectory_rotor_person_prr_offline.csv").exists()
    assert (out / "solutions" / "sensor_person.json").exists()
    capsys.readouterr()


def test_experiment_online_is_deterministic(tmp_path, capsys):
    reports = []
    for name in ("a", "b"):
        out = tmp_path / name
        argv = ["experiment", "online", "--flights", "1", "--seed", "1", "--causes", "wind", "--no-plot-data", "--out", str(out)]
        assert main(argv) == 0
        rep = json.loads((out / "online_report.json").read_text())
        for row in rep["rows"]:
            row.pop("runtime_seconds")
            row["raw"].pop("runtimes")
        reports.append(rep)
    assert reports[0] == reports[1]
    assert {r["controller"] for r in reports[0]["rows"]} == {"PRR-offline", "PRR-online"}
    capsys.readouterr()
