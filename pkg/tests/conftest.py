import numpy as np
import pytest

from sacbp.hybrid import ScenarioModel


class ToyModel(ScenarioModel):
    """Scalar-per-coordinate system ``x' = a x + u`` with optional constant costs."""

    def __init__(self, n=1, a=0.0, running=0.0, terminal=0.0, cu=0.0, box=5.0):
        self.n_x = n
        self.m = n
        self.a = a
        self.running = running
        self.terminal = terminal
        self.control_cost = np.full(n, cu)
        self.box_lo = np.full(n, -box)
        self.box_hi = np.full(n, box)

    def drift(self, x):
        return self.a * np.asarray(x, dtype=float)

    def control_matrix(self, x):
        return np.eye(self.n_x)

    def flow_jac(self, x, u):
        return self.a * np.eye(self.n_x)

    def jump(self, x, y):
        return np.array(x, dtype=float)

    def jump_jac(self, x, y):
        return np.eye(self.n_x)

    def sample_observation(self, x_pre, rng):
        return np.zeros(1)

    def predicted_observation(self, x_pre):
        return np.zeros(1)

    def state_cost(self, x):
        return self.running

    def terminal_cost(self, x):
        return self.terminal

    def random_state(self, rng, scale=1.0):
        return scale * rng.standard_normal(self.n_x)


@pytest.fixture
def toy():
    return ToyModel
