"""Small linear-Gaussian models with exact Kalman-filter oracles.

``LinearGaussianModel`` is a general belief-space model: the belief
``mu (+) vec(Sigma)`` follows the continuous-time KF prediction and jumps
through a linear KF update.  ``Mixed1DModel`` is a mixed-observability toy
with a scalar robot position and a scalar static target whose range-dependent
noise couples the belief jump to the robot.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..filters import ekf_update_arrays, pack_belief, unpack_belief
from ..hybrid import MixedModel, ScenarioModel
from .base import Scenario, World


def _stable_matrix(rng, n):
    M = rng.standard_normal((n, n)) * 0.5
    shift = max(0.0, np.max(np.linalg.eigvals(M).real)) + 0.5
    return M - shift * np.eye(n)


class LinearGaussianModel(ScenarioModel):
    """Continuous-discrete KF on ``dx = (A x + B u) dt + dW``, ``y = C x + v``.

    Running cost ``0.5 mu'Cx mu + 0.5 tr(Cx Sigma) + 0.5 u'Cu u``; terminal
    cost has the same state part weighted by ``terminal_weight``.  With
    ``deterministic=True`` observations equal the predicted measurement.
    """

    def __init__(self, A, B, C, Q, R, Cx, Cu, box, terminal_weight=1.0, deterministic=False):
        self.A = np.asarray(A, float)
        self.B = np.asarray(B, float)
        self.C = np.asarray(C, float)
        self.Q = np.asarray(Q, float)
        self.R = np.asarray(R, float)
        self.Cx = np.asarray(Cx, float)
        self.n = self.A.shape[0]
        self.n_x = self.n + self.n * self.n
        self.m = self.B.shape[1]
        self.control_cost = np.asarray(Cu, float)
        if np.any(self.control_cost <= 0):
            raise ValueError("control cost must be strictly positive")
        self.box_lo = -np.broadcast_to(np.asarray(box, float), (self.m,)).copy()
        self.box_hi = -self.box_lo
        self.terminal_weight = float(terminal_weight)
        self.deterministic = deterministic

    def unpack(self, x):
        return unpack_belief(x, self.n)

    def drift(self, x):
        mu, S = self.unpack(x)
        return pack_belief(self.A @ mu, self.A @ S + S @ self.A.T + self.Q)

    def control_matrix(self, x):
        H = np.zeros((self.n_x, self.m))
        H[: self.n] = self.B
        return H

    def flow_jvp(self, x, u, psi):
        dmu, dS = self.unpack(psi)
        return pack_belief(self.A @ dmu, self.A @ dS + dS @ self.A.T)

    def flow_vjp(self, x, u, r):
        rmu, rS = self.unpack(r)
        return pack_belief(self.A.T @ rmu, self.A.T @ rS + rS @ self.A)

    def flow_jac(self, x, u):
        return np.stack([self.flow_jvp(x, u, e) for e in np.eye(self.n_x)], axis=1)

    def jump(self, x, y):
        mu, S = self.unpack(x)
        mu2, S2 = ekf_update_arrays(mu, S, np.atleast_1d(y), self.C @ mu, self.C, self.R)
        return pack_belief(mu2, S2)

    def jump_jvp(self, x, y, psi):
        mu, S = self.unpack(x)
        S = 0.5 * (S + S.T)
        dmu, dS = self.unpack(psi)
        dS = 0.5 * (dS + dS.T)
        C = self.C
        Sinv = np.linalg.inv(C @ S @ C.T + self.R)
        K = S @ C.T @ Sinv
        dK = dS @ C.T @ Sinv - K @ (C @ dS @ C.T) @ Sinv
        innov = np.atleast_1d(y) - C @ mu
        dmu2 = dmu + dK @ innov - K @ C @ dmu
        dS2 = dS - dK @ C @ S - K @ C @ dS
        return pack_belief(dmu2, 0.5 * (dS2 + dS2.T))

    def jump_jac(self, x, y):
        return np.stack([self.jump_jvp(x, y, e) for e in np.eye(self.n_x)], axis=1)

    def jump_vjp(self, x, y, r):
        return self.jump_jac(x, y).T @ r

    def predicted_observation(self, x_pre):
        return self.C @ x_pre[: self.n]

    def sample_observation(self, x_pre, rng):
        if self.deterministic:
            return self.predicted_observation(x_pre)
        mu, S = self.unpack(x_pre)
        w, V = np.linalg.eigh(0.5 * (S + S.T))
        latent = mu + (V * np.sqrt(np.clip(w, 0, None))) @ rng.standard_normal(self.n)
        wr, Vr = np.linalg.eigh(self.R)
        return self.C @ latent + (Vr * np.sqrt(np.clip(wr, 0, None))) @ rng.standard_normal(self.R.shape[0])

    def _state_part(self, x):
        mu, S = self.unpack(x)
        return 0.5 * float(mu @ self.Cx @ mu) + 0.5 * float(np.sum(self.Cx * S))

    def _state_part_grad(self, x):
        mu, _ = self.unpack(x)
        return pack_belief(self.Cx @ mu, 0.5 * self.Cx.T)

    def state_cost(self, x):
        return self._state_part(x)

    def state_cost_grad(self, x):
        return self._state_part_grad(x)

    def terminal_cost(self, x):
        return self.terminal_weight * self._state_part(x)

    def terminal_cost_grad(self, x):
        return self.terminal_weight * self._state_part_grad(x)

    def random_state(self, rng, scale=1.0):
        mu = scale * rng.standard_normal(self.n)
        G = rng.standard_normal((self.n, self.n))
        return pack_belief(mu, G @ G.T + np.eye(self.n))


def make_linear_fixture(dim: int = 2, seed: int = 0, *, n_obs: int | None = None, m: int | None = None,
                        deterministic: bool = False, zero_cost: bool = False, box: float = 5.0) -> LinearGaussianModel:
    """Random stable linear-Gaussian model with quadratic costs."""
    rng = np.random.default_rng(seed)
    n_obs = dim if n_obs is None else n_obs
    m = dim if m is None else m
    A = _stable_matrix(rng, dim)
    B = rng.standard_normal((dim, m))
    C = rng.standard_normal((n_obs, dim))
    G = rng.standard_normal((dim, dim)) * 0.3
    Q = G @ G.T + 0.1 * np.eye(dim)
    G = rng.standard_normal((n_obs, n_obs)) * 0.3
    R = G @ G.T + 0.2 * np.eye(n_obs)
    Cx = np.zeros((dim, dim)) if zero_cost else np.diag(rng.uniform(0.5, 2.0, dim))
    Cu = rng.uniform(0.2, 1.0, m)
    return LinearGaussianModel(A, B, C, Q, R, Cx, Cu, box, terminal_weight=0.0 if zero_cost else 2.0,
                               deterministic=deterministic)


def linear_initial_belief(model: LinearGaussianModel, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng([seed, 1])
    return pack_belief(rng.standard_normal(model.n), np.eye(model.n))


class Mixed1DModel(MixedModel):
    """Scalar robot ``p' = a p + u`` sensing a static scalar target.

    Belief ``(mu, s)``; each epoch adds ``q dt_obs`` to ``s`` and applies a KF
    update with noise variance ``r0 + r1 (mu - p)^2``.  Costs:
    ``0.5 wp p^2 + 0.5 ws s + 0.5 cu u^2`` running, ``0.5 hp p^2 + 0.5 hs s``
    terminal.
    """

    n_p = 1
    n_x = 3
    m = 1

    def __init__(self, a=-0.5, q=0.1, dt_obs=0.5, r0=0.2, r1=0.5, wp=0.3, ws=1.0, hp=0.5, hs=2.0, cu=0.5,
                 box=3.0, deterministic=False):
        self.a, self.q, self.dt_obs = a, q, dt_obs
        self.r0, self.r1 = r0, r1
        self.wp, self.ws, self.hp, self.hs = wp, ws, hp, hs
        self.control_cost = np.array([cu], float)
        self.box_lo = np.array([-box], float)
        self.box_hi = np.array([box], float)
        self.deterministic = deterministic

    def phys_drift(self, p):
        return self.a * p

    def phys_control_matrix(self, p):
        return np.ones((1, 1))

    def phys_flow_jac(self, p, u):
        return np.array([[self.a]])

    def noise_var(self, p, mu):
        return self.r0 + self.r1 * (mu - p[0]) ** 2

    def belief_jump(self, p, b, y):
        mu, s = b
        s = s + self.q * self.dt_obs
        R = self.noise_var(p, mu)
        k = s / (s + R)
        return np.array([mu + k * (float(np.ravel(y)[0]) - mu), s - k * s])

    def sample_observation(self, x_pre, rng):
        p, (mu, s) = x_pre[:1], x_pre[1:]
        s = s + self.q * self.dt_obs
        if self.deterministic:
            return np.array([mu])
        latent = mu + np.sqrt(s) * rng.standard_normal()
        return np.array([latent + np.sqrt(self.noise_var(p, mu)) * rng.standard_normal()])

    def predicted_observation(self, x_pre):
        return np.array([x_pre[1]])

    def state_cost(self, x):
        return 0.5 * self.wp * x[0] ** 2 + 0.5 * self.ws * x[2]

    def state_cost_grad(self, x):
        return np.array([self.wp * x[0], 0.0, 0.5 * self.ws])

    def terminal_cost(self, x):
        return 0.5 * self.hp * x[0] ** 2 + 0.5 * self.hs * x[2]

    def terminal_cost_grad(self, x):
        return np.array([self.hp * x[0], 0.0, 0.5 * self.hs])

    def random_state(self, rng, scale=1.0):
        return np.array([scale * rng.standard_normal(), scale * rng.standard_normal(), rng.uniform(0.2, 2.0)])


# --- receding-horizon wrapper ----------------------------------------------


@dataclass
class LinearWorld(World):
    model: LinearGaussianModel
    x_true: np.ndarray
    rng: np.random.Generator
    noise: bool = True

    def step(self, u, dt):
        m = self.model
        self.x_true = self.x_true + dt * (m.A @ self.x_true + m.B @ u)
        if self.noise:
            w, V = np.linalg.eigh(m.Q * dt)
            self.x_true = self.x_true + (V * np.sqrt(np.clip(w, 0, None))) @ self.rng.standard_normal(m.n)

    def observe(self, x_planner):
        m = self.model
        y = m.C @ self.x_true
        if self.noise:
            w, V = np.linalg.eigh(m.R)
            y = y + (V * np.sqrt(np.clip(w, 0, None))) @ self.rng.standard_normal(m.R.shape[0])
        return y

    def metrics(self, x_planner):
        mu = x_planner[: self.model.n]
        return {"true_state_norm": float(np.linalg.norm(self.x_true)),
                "estimation_error": float(np.linalg.norm(mu - self.x_true))}


class LinearScenario(Scenario):
    """Linear fixture wrapped for the receding-horizon loop."""

    name = "linear"

    def __init__(self, model: LinearGaussianModel, x_true0, noise: bool = True):
        self.model = model
        self.x_true0 = np.asarray(x_true0, float)
        self.noise = noise
        self.initial_state = pack_belief(self.x_true0, np.eye(model.n))

    def make_world(self, rng):
        return LinearWorld(self.model, self.x_true0.copy(), rng, self.noise)


@dataclass
class LinearScenarioConfig:
    dim: int = 2
    seed: int = 0
    noise: bool = True
    zero_dynamics: bool = False
    zero_cost: bool = False

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be at least 1")


def make_linear_scenario(dim=2, seed=0, *, noise=True, zero_dynamics=False, zero_cost=False) -> LinearScenario:
    model = make_linear_fixture(dim, seed, zero_cost=zero_cost)
    if zero_dynamics:
        model.A = np.zeros_like(model.A)
        model.Q = np.zeros_like(model.Q)
    if not noise:
        model.deterministic = True
    x_true0 = np.random.default_rng([seed, 2]).standard_normal(dim)
    return LinearScenario(model, x_true0, noise)
