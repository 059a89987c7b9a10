"""Common scenario plumbing: a model plus its ground-truth world."""

from __future__ import annotations

import numpy as np

from ..hybrid import ControlSchedule


class World:
    """Ground-truth simulator driven by the receding-horizon loop."""

    def step(self, u, dt: float) -> None:
        raise NotImplementedError

    def observe(self, x_planner) -> np.ndarray:
        raise NotImplementedError

    def metrics(self, x_planner) -> dict:
        raise NotImplementedError


class Scenario:
    """Bundle of a :class:`~sacbp.hybrid.ScenarioModel`, initial planner state and world."""

    name = "scenario"
    model = None
    initial_state: np.ndarray

    def make_world(self, rng) -> World:
        raise NotImplementedError

    def base_nominal(self, t0: float, n_cells: int, dt: float):
        """Default nominal for a planning epoch: zero control unless overridden."""
        m = self.model
        zero = np.clip(np.zeros(m.m), m.box_lo, m.box_hi)
        return ControlSchedule.constant(t0, dt, n_cells, zero, m.box_lo, m.box_hi)

    def filter_jump(self, x, y):
        return self.model.jump(x, y)
