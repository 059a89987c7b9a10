"""Experiment configuration, parallel runs, verification suites and CLI."""

from .config import ConfigError, ExperimentConfig, load_config
from .runner import run, run_seed, sweep
from .verify import SUITES, verify

__all__ = ["ConfigError", "ExperimentConfig", "SUITES", "load_config", "run", "run_seed", "sweep", "verify"]
