import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from sacbp.harness import ConfigError, ExperimentConfig, load_config, run, sweep
from sacbp.harness import runner
from sacbp.harness.cli import main, parse_values
from sacbp.harness.config import set_path

LINEAR = {
    "scenario": {"id": "linear", "config": {"dim": 2, "seed": 0, "noise": False, "zero_dynamics": True}},
    "planner": {"id": "nominal_only", "params": {"horizon": 1.0, "dt_obs": 0.5, "dt_ctrl": 0.01, "t_calc": 0.1,
                                                 "eps": 0.1}},
    "sim_duration": 3.0,
    "seeds": [0, 1],
}


def _write(tmp_path, tree, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(tree))
    return path


def _read_csv(path):
    rows = list(csv.reader(io.StringIO(path.read_text())))
    return rows[0], rows[1:]


# --- configuration ---------------------------------------------------------------


@pytest.mark.parametrize("edit", [
    ("scenario.id", "nope"),
    ("planner.id", "nope"),
    ("scenario.config.bogus", 1),
    ("planner.params.eps", 0.7),
    ("planner.dpw.depth", 0),
    ("planner.dpw.rollout_policy", "x"),
    ("seeds", []),
    ("seeds", [1, 1]),
    ("seeds", [-1]),
    ("sim_duration", 1.2),
    ("workers", 0),
    ("extra", 1),
])
def test_bad_configs_are_rejected(edit):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(set_path(LINEAR, *edit))


def test_dt_obs_must_match_scenario():
    tree = {"scenario": {"id": "tracking", "config": {"dt_obs": 0.2}},
            "planner": {"id": "sacbp", "params": {"dt_obs": 0.4, "horizon": 2.0, "eps": 0.16, "t_calc": 0.15}},
            "sim_duration": 4.0}
    with pytest.raises(ConfigError, match="dt_obs"):
        ExperimentConfig.from_dict(tree)


def test_config_round_trip(tmp_path):
    cfg = load_config(_write(tmp_path, LINEAR))
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.params(7).base_seed == 7


def test_shipped_configs_load():
    from pathlib import Path

    paths = sorted(Path(__file__).resolve().parents[1].joinpath("configs").glob("*.yaml"))
    assert paths
    for path in paths:
        load_config(path)


def test_worker_resolution(monkeypatch):
    cfg = ExperimentConfig.from_dict(LINEAR)
    monkeypatch.delenv("SACBP_WORKERS", raising=False)
    assert cfg.resolved_workers() == 1
    monkeypatch.setenv("SACBP_WORKERS", "3")
    assert cfg.resolved_workers() == 3
    assert cfg.resolved_workers(2) == 2
    assert ExperimentConfig.from_dict({**LINEAR, "workers": 5}).resolved_workers() == 5
    monkeypatch.setenv("SACBP_WORKERS", "many")
    with pytest.raises(ConfigError):
        cfg.resolved_workers()


def test_parse_values():
    assert parse_values("0.1, 0.2,3") == [0.1, 0.2, 3]
    with pytest.raises(ConfigError):
        parse_values(" , ")


# --- run --------------------------------------------------------------------------


def test_nominal_run_on_static_world_is_constant(tmp_path):
    res = run(ExperimentConfig.from_dict(LINEAR), workers=1, out=tmp_path)
    assert res.exit_code == 0
    for seed in (0, 1):
        header, rows = _read_csv(tmp_path / f"linear_nominal_only_seed{seed}.csv")
        assert header == ["t", "metric", "value"]
        assert len(rows) == 6 * len({r[1] for r in rows})
        for name in {r[1] for r in rows}:
            assert len({r[2] for r in rows if r[1] == name}) == 1


def test_csv_values_round_trip_exactly(tmp_path):
    tree = set_path(LINEAR, "scenario.config", {"dim": 2, "seed": 4})
    res = run(ExperimentConfig.from_dict(tree), workers=1, out=tmp_path)
    text = res.csv[0]
    assert text.startswith("t,metric,value\n")
    times = []
    for line in text.splitlines()[1:]:
        t, _, v = line.split(",")
        assert repr(float(v)) == repr(np.float64(v).item())
        assert float(f"{float(v):.17g}") == float(v)
        times.append(float(t))
    assert times == sorted(times)


def test_summary_lists_failed_seeds(tmp_path, monkeypatch):
    real = runner.receding_horizon_run

    def flaky(scenario, controller, sim_duration, seed):
        if seed == 1:
            raise RuntimeError("boom")
        return real(scenario, controller, sim_duration, seed)

    monkeypatch.setattr(runner, "receding_horizon_run", flaky)
    res = run(ExperimentConfig.from_dict({**LINEAR, "seeds": [0, 1, 2]}), workers=1, out=tmp_path)
    assert res.exit_code == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    seeds = {s["seed"]: s for s in summary["seeds"]}
    assert set(seeds) == {0, 1, 2}
    assert seeds[1]["failed"] and "boom" in seeds[1]["failure_reason"]
    assert summary["aggregate"]["n_failed"] == 1
    assert not (tmp_path / "linear_nominal_only_seed1.csv").exists()


def test_all_failed_exits_one(tmp_path, monkeypatch):
    def broken(*args):
        raise RuntimeError("boom")

    monkeypatch.setattr(runner, "receding_horizon_run", broken)
    assert run(ExperimentConfig.from_dict(LINEAR), workers=1, out=tmp_path).exit_code == 1


def test_summary_statistics(tmp_path):
    tree = set_path(LINEAR, "scenario.config", {"dim": 2, "seed": 4})
    tree["seeds"] = [0, 1, 2]
    res = run(ExperimentConfig.from_dict(tree), workers=1, out=tmp_path)
    finals = [s["final"]["estimation_error"] for s in res.summary["seeds"]]
    agg = res.summary["aggregate"]["final"]["estimation_error"]
    assert agg["mean"] == pytest.approx(np.mean(finals))
    assert agg["std"] == pytest.approx(np.std(finals))
    assert agg["median"] == pytest.approx(np.median(finals))


def test_worker_count_does_not_change_csv(tmp_path):
    tree = set_path(LINEAR, "scenario.config", {"dim": 2, "seed": 4})
    tree["planner"]["id"] = "sacbp"
    tree["seeds"] = [0, 1, 2]
    cfg = ExperimentConfig.from_dict(tree)
    a = run(cfg, workers=1, out=tmp_path / "w1").csv
    b = run(cfg, workers=3, out=tmp_path / "w3").csv
    assert a == b
    for seed in cfg.seeds:
        name = f"linear_sacbp_seed{seed}.csv"
        assert (tmp_path / "w1" / name).read_bytes() == (tmp_path / "w3" / name).read_bytes()


def test_sweep_writes_one_directory_per_value(tmp_path):
    cfg = ExperimentConfig.from_dict({**LINEAR, "seeds": [0]})
    results = sweep(cfg, "planner.params.eps", [0.05, 0.1], workers=1, out=tmp_path)
    assert [v for v, _ in results] == [0.05, 0.1]
    for v in (0.05, 0.1):
        assert (tmp_path / f"planner.params.eps={v}" / "summary.json").exists()
    index = json.loads((tmp_path / "sweep.json").read_text())
    assert [r["value"] for r in index["runs"]] == [0.05, 0.1]


# --- command line ------------------------------------------------------------------


def test_cli_run_and_exit_codes(tmp_path, capsys):
    path = _write(tmp_path, LINEAR)
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "out")]) == 0
    assert json.loads(capsys.readouterr().out)["n_seeds"] == 2
    assert main(["run", "--config", str(_write(tmp_path, set_path(LINEAR, "scenario.id", "x"), "bad.yaml"))]) == 2
    (tmp_path / "broken.yaml").write_text("scenario: [unclosed\n")
    assert main(["run", "--config", str(tmp_path / "broken.yaml")]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["run", "--config", str(path), "--workers", "0"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["run"])
    assert exc.value.code == 2


def test_cli_verify_table(capsys):
    assert main(["verify", "--suite", "qp-bruteforce"]) == 0
    rows = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert rows[0] == ["suite", "case", "value", "tolerance", "status"]
    assert len(rows) >= 3
    assert {r[4] for r in rows[1:]} == {"PASS"}
    assert main(["verify", "--suite", "nope"]) == 2


def test_cli_sweep(tmp_path, capsys):
    path = _write(tmp_path, {**LINEAR, "seeds": [0]})
    assert main(["sweep", "--config", str(path), "--param", "planner.params.eps", "--values", "0.05,0.1",
                 "--out", str(tmp_path / "sw")]) == 0
    assert "planner.params.eps=0.05: exit 0" in capsys.readouterr().out


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "sacbp", "verify", "--suite", "nope"], capture_output=True, text=True)
    assert out.returncode == 2
    assert "unknown suite" in out.stderr
