"""Per-seed experiment execution, result persistence and parameter sweeps."""

from __future__ import annotations

import dataclasses
import json
import logging
import multiprocessing
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..baselines import GreedyController, MCTSController, NominalController, position_controller
from ..planner import SACBPController, receding_horizon_run
from .config import ConfigError, ExperimentConfig, set_path

log = logging.getLogger(__name__)

EXIT_OK, EXIT_RUN_FAILED, EXIT_USAGE = 0, 1, 2


def build_scenario(cfg: ExperimentConfig):
    scen_cfg = cfg.scenario_cfg()
    if cfg.scenario == "linear":
        from ..scenarios import make_linear_scenario

        return make_linear_scenario(**dataclasses.asdict(scen_cfg))
    if cfg.scenario == "tracking":
        from ..scenarios import make_tracking_scenario

        return make_tracking_scenario(scen_cfg)
    from ..scenarios import make_manipulation_scenario

    return make_manipulation_scenario(scen_cfg)


def _mcts_rollout(scenario):
    """Position controller rollouts for manipulation; zero control elsewhere."""
    if scenario.name != "manipulation":
        return None
    from ..scenarios.manipulation import N_STATE

    gains = np.asarray(scenario.cfg.gains, dtype=float)
    lo, hi = scenario.model.box_lo, scenario.model.box_hi
    return lambda x: position_controller(np.asarray(x)[:N_STATE], gains, lo, hi)


def build_controller(cfg: ExperimentConfig, scenario, seed: int):
    params = cfg.params(seed)
    model = scenario.model
    if cfg.planner == "sacbp":
        return SACBPController(model, params)
    if cfg.planner == "greedy":
        return GreedyController(model, params)
    if cfg.planner == "nominal_only":
        return NominalController(model, params)
    dpw = dataclasses.replace(cfg.dpw(), rollout_policy=_mcts_rollout(scenario))
    return MCTSController(model, params, dpw)


def run_seed(tree: dict, seed: int) -> dict:
    """One closed-loop run; exceptions are reported, never raised."""
    start = time.perf_counter()
    try:
        cfg = ExperimentConfig.from_dict(tree)
        scenario = build_scenario(cfg)
        controller = build_controller(cfg, scenario, seed)
        metrics = receding_horizon_run(scenario, controller, cfg.sim_duration, seed)
        summary = dict(metrics.summary)
        csv = metrics.to_csv()
    except Exception as exc:  # noqa: BLE001 - a failed seed must not abort the experiment
        summary = {"failed": True, "failure_reason": f"{type(exc).__name__}: {exc}",
                   "traceback": traceback.format_exc()}
        csv = None
    summary["seed"] = int(seed)
    summary["run_seconds"] = time.perf_counter() - start
    return {"seed": int(seed), "csv": csv, "summary": summary}


def _run_seed_star(args):
    return run_seed(*args)


def _map_seeds(tree, seeds, workers):
    jobs = [(tree, s) for s in seeds]
    if workers <= 1 or len(seeds) == 1:
        return [run_seed(*job) for job in jobs]
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=min(workers, len(seeds)), mp_context=ctx) as pool:
        return list(pool.map(_run_seed_star, jobs))


def _aggregate(results) -> dict:
    ok = [r["summary"] for r in results if not r["summary"].get("failed")]
    names = sorted({k for s in ok for k in s.get("final", {})})
    stats = {}
    for name in names:
        vals = np.array([s["final"][name] for s in ok if name in s["final"]])
        stats[name] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)),
                       "median": float(np.median(vals)), "min": float(np.min(vals)), "max": float(np.max(vals))}
    walls = np.array([s["mean_wall_clock"] for s in ok]) if ok else np.zeros(0)
    return {
        "final": stats,
        "wall_clock": {
            "mean_per_update": float(np.mean(walls)) if walls.size else None,
            "std_per_update": float(np.std(walls)) if walls.size else None,
            "max_per_update": float(max(s["max_wall_clock"] for s in ok)) if ok else None,
        },
        "n_seeds": len(results),
        "n_failed": len(results) - len(ok),
    }


@dataclass
class ExperimentResult:
    summary: dict
    csv: dict = field(default_factory=dict)
    exit_code: int = EXIT_OK


def csv_name(cfg: ExperimentConfig, seed: int) -> str:
    return f"{cfg.scenario}_{cfg.planner}_seed{seed}.csv"


def run(cfg: ExperimentConfig, workers: int | None = None, out: str | os.PathLike | None = None) -> ExperimentResult:
    """Run every seed, write one CSV per run plus ``summary.json``.

    Exit code is 1 when every seed failed, otherwise 0.
    """
    n_workers = cfg.resolved_workers(workers)
    out_dir = Path(out if out is not None else cfg.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    tree = cfg.to_dict()
    results = _map_seeds(tree, list(cfg.seeds), n_workers)
    csvs = {}
    for r in results:
        if r["csv"] is not None:
            name = csv_name(cfg, r["seed"])
            (out_dir / name).write_text(r["csv"])
            csvs[r["seed"]] = r["csv"]
    summary = {
        "config": tree,
        "workers": n_workers,
        "seeds": [r["summary"] for r in results],
        "aggregate": _aggregate(results),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    failed = summary["aggregate"]["n_failed"]
    for r in results:
        if r["summary"].get("failed"):
            log.warning("seed %d failed: %s", r["seed"], r["summary"].get("failure_reason"))
    code = EXIT_RUN_FAILED if failed == len(results) else EXIT_OK
    return ExperimentResult(summary, csvs, code)


def sweep(cfg: ExperimentConfig, param: str, values, workers: int | None = None,
          out: str | os.PathLike | None = None) -> list:
    """Run the experiment once per value of the dotted config ``param``.

    ``param`` addresses the YAML tree, e.g. ``planner.params.eps``.  Each value
    gets its own subdirectory ``<param>=<value>``.
    """
    base = cfg.to_dict()
    root = Path(out if out is not None else cfg.output)
    results = []
    for value in values:
        tree = set_path(base, param, value)
        sub = ExperimentConfig.from_dict(tree)
        res = run(sub, workers=workers, out=root / f"{param}={value}")
        results.append((value, res))
    index = [{"value": v, "exit_code": r.exit_code, "aggregate": r.summary["aggregate"]} for v, r in results]
    root.mkdir(parents=True, exist_ok=True)
    (root / "sweep.json").write_text(json.dumps({"param": param, "runs": index}, indent=2, sort_keys=True) + "\n")
    return results


__all__ = [
    "ConfigError",
    "EXIT_OK",
    "EXIT_RUN_FAILED",
    "EXIT_USAGE",
    "ExperimentResult",
    "build_controller",
    "build_scenario",
    "run",
    "run_seed",
    "sweep",
]
