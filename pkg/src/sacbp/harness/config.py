"""Experiment configuration loaded from YAML."""

from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field

import yaml

from ..baselines import DPWParams
from ..planner import PlannerParams
from ..scenarios import LinearScenarioConfig, TrackingConfig


def _manipulation_config():
    from ..scenarios.manipulation import ManipulationConfig

    return ManipulationConfig


# Scenario id -> config class loader (manipulation pulls in JAX, so it loads lazily).
SCENARIOS = {
    "linear": lambda: LinearScenarioConfig,
    "tracking": lambda: TrackingConfig,
    "manipulation": _manipulation_config,
}
PLANNERS = ("sacbp", "greedy", "mcts_dpw", "nominal_only")


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


def _build(cls, values, where):
    values = dict(values or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class ExperimentConfig:
    scenario: str
    planner: str
    scenario_config: dict = field(default_factory=dict)
    planner_params: dict = field(default_factory=dict)
    dpw_params: dict = field(default_factory=dict)
    sim_duration: float = 20.0
    seeds: list = field(default_factory=lambda: [0])
    output: str = "results"
    workers: int | None = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}; choose from {sorted(SCENARIOS)}")
        if self.planner not in PLANNERS:
            raise ConfigError(f"unknown planner {self.planner!r}; choose from {list(PLANNERS)}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if len(set(self.seeds)) != len(self.seeds) or not all(isinstance(s, int) and s >= 0 for s in self.seeds):
            raise ConfigError("seeds must be distinct non-negative integers")
        if not self.sim_duration > 0:
            raise ConfigError("sim_duration must be positive")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be at least 1")
        # Fail early on bad nested values.
        scen = self.scenario_cfg()
        params = self.params()
        self.dpw()
        dt_obs = getattr(scen, "dt_obs", None)
        if dt_obs is not None and abs(dt_obs - params.dt_obs) > 1e-12:
            raise ConfigError(f"planner dt_obs {params.dt_obs} differs from scenario dt_obs {dt_obs}")
        n = round(self.sim_duration / params.dt_obs)
        if n < 1 or abs(n * params.dt_obs - self.sim_duration) > 1e-9 * max(1.0, self.sim_duration):
            raise ConfigError("sim_duration must be a positive multiple of dt_obs")

    def scenario_cfg(self):
        return _build(SCENARIOS[self.scenario](), self.scenario_config, "scenario.config")

    def params(self, seed: int | None = None) -> PlannerParams:
        values = dict(self.planner_params)
        if seed is not None:
            values["base_seed"] = int(seed)
        return _build(PlannerParams, values, "planner.params")

    def dpw(self) -> DPWParams:
        p = _build(PlannerParams, self.planner_params, "planner.params")
        values = {"dt_obs": p.dt_obs, "dt_ctrl": p.dt_ctrl, **self.dpw_params}
        if "rollout_policy" in values or "candidate_actions" in values:
            raise ConfigError("planner.dpw: rollout_policy and candidate_actions are set by the scenario")
        return _build(DPWParams, values, "planner.dpw")

    def resolved_workers(self, override: int | None = None) -> int:
        """Explicit override, then the config value, then ``SACBP_WORKERS``, then 1."""
        if override is not None:
            return int(override)
        if self.workers is not None:
            return int(self.workers)
        env = os.environ.get("SACBP_WORKERS")
        if env:
            try:
                value = int(env)
            except ValueError as exc:
                raise ConfigError(f"SACBP_WORKERS must be an integer, got {env!r}") from exc
            if value < 1:
                raise ConfigError("SACBP_WORKERS must be at least 1")
            return value
        return 1

    def to_dict(self) -> dict:
        return {
            "scenario": {"id": self.scenario, "config": copy.deepcopy(self.scenario_config)},
            "planner": {"id": self.planner, "params": copy.deepcopy(self.planner_params),
                        "dpw": copy.deepcopy(self.dpw_params)},
            "sim_duration": self.sim_duration,
            "seeds": list(self.seeds),
            "output": self.output,
            "workers": self.workers,
        }

    @classmethod
    def from_dict(cls, tree) -> "ExperimentConfig":
        if not isinstance(tree, dict):
            raise ConfigError("config must be a mapping")
        allowed = {"scenario", "planner", "sim_duration", "seeds", "output", "workers"}
        unknown = sorted(set(tree) - allowed)
        if unknown:
            raise ConfigError(f"unknown top-level keys {unknown}")
        scen = tree.get("scenario")
        plan = tree.get("planner")
        if not isinstance(scen, dict) or "id" not in scen:
            raise ConfigError("scenario.id is required")
        if not isinstance(plan, dict) or "id" not in plan:
            raise ConfigError("planner.id is required")
        if set(scen) - {"id", "config"} or set(plan) - {"id", "params", "dpw"}:
            raise ConfigError("unexpected keys under scenario or planner")
        seeds = tree.get("seeds", [0])
        if isinstance(seeds, int):
            seeds = [seeds]
        if not isinstance(seeds, list):
            raise ConfigError("seeds must be a list of integers")
        for key in ("config", "params", "dpw"):
            node = scen.get(key) if key == "config" else plan.get(key)
            if node is not None and not isinstance(node, dict):
                raise ConfigError(f"{key} must be a mapping")
        try:
            return cls(
                scenario=scen["id"],
                planner=plan["id"],
                scenario_config=scen.get("config") or {},
                planner_params=plan.get("params") or {},
                dpw_params=plan.get("dpw") or {},
                sim_duration=float(tree.get("sim_duration", 20.0)),
                seeds=list(seeds),
                output=str(tree.get("output", "results")),
                workers=tree.get("workers"),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            tree = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return ExperimentConfig.from_dict(tree)


def set_path(tree: dict, path: str, value) -> dict:
    """Copy of ``tree`` with the dotted ``path`` set to ``value``."""
    out = copy.deepcopy(tree)
    keys = path.split(".")
    node = out
    for key in keys[:-1]:
        if node.get(key) is None:
            node[key] = {}
        node = node[key]
        if not isinstance(node, dict):
            raise ConfigError(f"{path}: {key} is not a mapping")
    node[keys[-1]] = value
    return out
