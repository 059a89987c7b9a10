"""Tracking benchmark: SACBP, greedy and zero control on the same seeds.

Usage: python scripts/run_tracking_benchmark.py [--seeds 10] [--duration 60] [--out results/tracking]
"""

import argparse
import json
from pathlib import Path

from sacbp.harness import ExperimentConfig, load_config, run

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--duration", type=float, default=60.0)
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--out", default="results/tracking")
    args = ap.parse_args()
    base = load_config(CONFIGS / "tracking_sacbp.yaml").to_dict()
    base["seeds"] = list(range(args.seeds))
    base["sim_duration"] = args.duration
    table = {}
    for planner in ("sacbp", "greedy", "nominal_only"):
        tree = {**base, "planner": {**base["planner"], "id": planner}}
        res = run(ExperimentConfig.from_dict(tree), workers=args.workers, out=Path(args.out) / planner)
        agg = res.summary["aggregate"]
        table[planner] = {"worst_entropy": agg["final"].get("worst_entropy"), "wall_clock": agg["wall_clock"],
                          "n_failed": agg["n_failed"]}
    print(json.dumps(table, indent=2))


if __name__ == "__main__":
    main()
