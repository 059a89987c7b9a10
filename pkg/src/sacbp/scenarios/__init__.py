"""Scenario models: tracking, manipulation and linear-Gaussian fixtures.

The manipulation scenario depends on JAX and is imported lazily.
"""

from .base import Scenario, World
from .fixtures import (
    LinearGaussianModel,
    LinearScenario,
    LinearScenarioConfig,
    Mixed1DModel,
    linear_initial_belief,
    make_linear_fixture,
    make_linear_scenario,
)
from .tracking import TrackingConfig, TrackingModel, TrackingScenario, make_tracking_scenario


def make_manipulation_scenario(cfg=None):
    from .manipulation import make_manipulation_scenario as make

    return make(cfg)


__all__ = [
    "LinearGaussianModel",
    "LinearScenario",
    "LinearScenarioConfig",
    "Mixed1DModel",
    "Scenario",
    "TrackingConfig",
    "TrackingModel",
    "TrackingScenario",
    "World",
    "linear_initial_belief",
    "make_linear_fixture",
    "make_linear_scenario",
    "make_manipulation_scenario",
    "make_tracking_scenario",
]
