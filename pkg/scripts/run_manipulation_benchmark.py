"""Manipulation benchmark: SACBP against MCTS-DPW at a matched per-update time.

SACBP runs first on a shared, pre-compiled model; its mean update time sets
the MCTS query budget through ``calibrate_n_queries``.

Usage: python scripts/run_manipulation_benchmark.py [--seeds 10] [--out results/manipulation]
"""

import argparse
import json
from pathlib import Path

import numpy as np

from sacbp.baselines import calibrate_n_queries
from sacbp.harness import ExperimentConfig, load_config
from sacbp.harness.runner import _mcts_rollout, build_controller, build_scenario
from sacbp.planner import receding_horizon_run

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _run_all(cfg, scenario, out):
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in cfg.seeds:
        log = receding_horizon_run(scenario, build_controller(cfg, scenario, seed), cfg.sim_duration, seed)
        (out / f"manipulation_{cfg.planner}_seed{seed}.csv").write_text(log.to_csv())
        rows.append(log.summary)
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--out", default="results/manipulation")
    args = ap.parse_args()
    out = Path(args.out)
    sac_cfg = load_config(CONFIGS / "manipulation_sacbp.yaml")
    sac_cfg.seeds = list(range(args.seeds))
    scenario = build_scenario(sac_cfg)
    receding_horizon_run(scenario, build_controller(sac_cfg, scenario, 0), 1.0, 0)  # JIT warm-up
    sac = _run_all(sac_cfg, scenario, out / "sacbp")
    budget = float(np.mean([s["mean_wall_clock"] for s in sac]))

    tree = load_config(CONFIGS / "manipulation_mcts.yaml").to_dict()
    tree["seeds"] = sac_cfg.seeds
    dpw = ExperimentConfig.from_dict(tree).dpw()
    dpw.rollout_policy = _mcts_rollout(scenario)
    n_queries = calibrate_n_queries(scenario.initial_state, scenario.model, dpw, budget)
    tree["planner"]["dpw"] = {**tree["planner"]["dpw"], "n_queries": n_queries}
    mcts = _run_all(ExperimentConfig.from_dict(tree), scenario, out / "mcts_dpw")

    def stats(rows):
        finals = [r["final"]["residual_norm"] for r in rows]
        return {"median_final": float(np.median(finals)), "mean_final": float(np.mean(finals)),
                "mean_update_s": float(np.mean([r["mean_wall_clock"] for r in rows]))}

    reduced = sum(r["final"]["residual_norm"] <= 0.3 * r["initial"]["residual_norm"] for r in sac)
    summary = {"sacbp": {**stats(sac), "seeds_below_0.3_initial": reduced}, "mcts_dpw": stats(mcts),
               "mcts_n_queries": n_queries}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
