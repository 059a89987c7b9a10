"""Active range-only tracking of Brownian targets by a single-integrator robot.

Planner state: robot position ``p`` followed by one packed Gaussian belief
(mean 2 + column-major covariance 4) per target.  Each observation epoch
applies a Brownian prediction and a UKF range update to every target; the
terminal cost is the sum over targets of ``sqrt(det(2 pi e Sigma_i))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..filters import (
    gaussian_entropy_exp,
    psd_sqrt,
    range_measure,
    range_noise_cov,
    unscented_update,
)
from ..hybrid import MixedModel
from .base import Scenario, World

BLOCK = 6


def _eye2(scale):
    return (scale * np.eye(2)).tolist()


@dataclass
class TrackingConfig:
    n_targets: int = 5
    Q: list = field(default_factory=lambda: _eye2(0.1))
    R0: list = field(default_factory=lambda: _eye2(0.01))
    R1: list = field(default_factory=lambda: _eye2(0.001))
    speed_limit: float = 2.0
    control_cost_weight: float = 0.05
    dt_obs: float = 0.2
    robot_start: list = field(default_factory=lambda: [0.0, 0.0])
    cluster_centers: list = field(default_factory=lambda: [[-4.0, 3.0], [4.0, -3.0]])
    cluster_spread: float = 1.5
    initial_std: float = 1.0
    layout_seed: int = 0
    ukf_alpha: float = 1.0
    ukf_beta: float = 2.0
    ukf_kappa: float = 0.0

    def __post_init__(self):
        if self.n_targets < 1:
            raise ValueError("n_targets must be at least 1")
        for name in ("Q", "R0", "R1"):
            M = np.asarray(getattr(self, name), dtype=float)
            if M.shape != (2, 2) or not np.allclose(M, M.T) or np.min(np.linalg.eigvalsh(M)) < -1e-12:
                raise ValueError(f"{name} must be a symmetric PSD 2x2 matrix")
        if np.min(np.linalg.eigvalsh(np.asarray(self.R0, float))) <= 0:
            raise ValueError("R0 must be positive definite")
        if self.speed_limit <= 0 or self.control_cost_weight <= 0 or self.initial_std <= 0:
            raise ValueError("speed_limit, control_cost_weight and initial_std must be positive")

    def target_positions(self) -> np.ndarray:
        """Targets alternate between clusters; offsets drawn from ``layout_seed``."""
        rng = np.random.default_rng([self.layout_seed, 17])
        centers = np.asarray(self.cluster_centers, dtype=float)
        idx = np.arange(self.n_targets) % len(centers)
        return centers[idx] + self.cluster_spread * rng.uniform(-1, 1, (self.n_targets, 2))


class TrackingModel(MixedModel):
    """Mixed-observability tracking model with batched UKF jumps."""

    def __init__(self, cfg: TrackingConfig):
        self.cfg = cfg
        self.n_t = cfg.n_targets
        self.n_p = 2
        self.n_x = 2 + BLOCK * self.n_t
        self.m = 2
        self.Q = np.asarray(cfg.Q, dtype=float)
        self.R0 = np.asarray(cfg.R0, dtype=float)
        self.R1 = np.asarray(cfg.R1, dtype=float)
        self.dt_obs = cfg.dt_obs
        self.control_cost = np.full(2, 2.0 * cfg.control_cost_weight)
        self.box_lo = np.full(2, -cfg.speed_limit)
        self.box_hi = np.full(2, cfg.speed_limit)
        self._ukf = (cfg.ukf_alpha, cfg.ukf_beta, cfg.ukf_kappa)

    # packing
    def beliefs(self, b):
        blocks = np.asarray(b, dtype=float).reshape(self.n_t, BLOCK)
        return blocks[:, :2], blocks[:, 2:].reshape(self.n_t, 2, 2).transpose(0, 2, 1)

    def pack(self, means, covs):
        covs = np.asarray(covs).transpose(0, 2, 1).reshape(-1, 4)
        return np.concatenate([np.asarray(means).reshape(-1, 2), covs], axis=1).ravel()

    def initial_state(self, robot, means, std):
        covs = np.tile((std**2) * np.eye(2), (self.n_t, 1, 1))
        return np.concatenate([np.asarray(robot, float), self.pack(means, covs)])

    # physical flow
    def phys_drift(self, p):
        return np.zeros(2)

    def phys_control_matrix(self, p):
        return np.eye(2)

    def phys_flow(self, p, u):
        return np.asarray(u, dtype=float).copy()

    def phys_flow_jac(self, p, u):
        return np.zeros((2, 2))

    def flow_interval(self, x, u, n_steps, dt):
        x = np.array(x, dtype=float)
        x[:2] += n_steps * dt * np.asarray(u)
        return x, n_steps * dt * self.control_cost_value(np.asarray(u))

    # jump
    def _batched_jump(self, P, means, covs, ys):
        covs = covs + self.Q * self.dt_obs
        R = range_noise_cov(self.R0, self.R1, P, means)
        return unscented_update(means, covs, R, ys, range_measure(P), *self._ukf)

    def belief_jump(self, p, b, y):
        means, covs = self.beliefs(b)
        P = np.tile(np.asarray(p, float), (self.n_t, 1))
        ys = np.asarray(y, dtype=float).reshape(self.n_t, 1)
        m2, c2 = self._batched_jump(P, means, covs, ys)
        return self.pack(m2, c2)

    def belief_jump_jac(self, p, b, y):
        """Central differences batched over targets; blocks are independent across targets."""
        n_t = self.n_t
        p = np.asarray(p, dtype=float)
        blocks = np.asarray(b, dtype=float).reshape(n_t, BLOCK)
        z = np.concatenate([np.tile(p, (n_t, 1)), blocks], axis=1)  # (n_t, 8)
        nz = z.shape[1]
        h = np.maximum(1e-6, 1e-6 * np.abs(z))
        E = np.eye(nz)
        pert = np.concatenate([z[:, None, :] + h[:, None, :] * E, z[:, None, :] - h[:, None, :] * E], axis=1)
        flat = pert.reshape(-1, nz)
        P = flat[:, :2]
        means = flat[:, 2:4]
        covs = flat[:, 4:].reshape(-1, 2, 2).transpose(0, 2, 1)
        ys = np.repeat(np.asarray(y, float).reshape(n_t, 1), 2 * nz, axis=0)
        m2, c2 = self._batched_jump(P, means, covs, ys)
        out = np.concatenate([m2, c2.transpose(0, 2, 1).reshape(-1, 4)], axis=1).reshape(n_t, 2 * nz, BLOCK)
        D = (out[:, :nz] - out[:, nz:]) / (2 * h[:, :, None])  # (n_t, nz, BLOCK): d out / d z_k
        if not np.all(np.isfinite(D)):
            raise FloatingPointError("non-finite jump Jacobian")
        Jp = D[:, :2, :].transpose(0, 2, 1).reshape(n_t * BLOCK, 2)
        Jb = np.zeros((n_t * BLOCK, n_t * BLOCK))
        for i in range(n_t):
            s = slice(i * BLOCK, (i + 1) * BLOCK)
            Jb[s, s] = D[i, 2:, :].T
        return Jp, Jb

    def sample_observation(self, x_pre, rng):
        p = x_pre[:2]
        means, covs = self.beliefs(x_pre[2:])
        covs = covs + self.Q * self.dt_obs
        R = range_noise_cov(self.R0, self.R1, p[None], means)
        ys = np.empty(self.n_t)
        for i in range(self.n_t):
            q = means[i] + psd_sqrt(covs[i]) @ rng.standard_normal(2)
            v = psd_sqrt(R[i]) @ rng.standard_normal(2)
            ys[i] = np.linalg.norm(q - p + v)
        return ys

    def predicted_observation(self, x_pre):
        means, _ = self.beliefs(x_pre[2:])
        return np.linalg.norm(means - x_pre[:2], axis=1)

    # costs
    def entropies(self, x):
        _, covs = self.beliefs(x[2:])
        return np.array([gaussian_entropy_exp(c)[0] for c in covs])

    def terminal_cost(self, x):
        return float(np.sum(self.entropies(x)))

    def terminal_cost_grad(self, x):
        _, covs = self.beliefs(x[2:])
        g = np.zeros(self.n_x)
        grads = np.stack([gaussian_entropy_exp(c)[1] for c in covs])
        g[2:] = self.pack(np.zeros((self.n_t, 2)), grads)
        return g

    def running_cost_grad(self, x, u):
        return np.zeros(self.n_x)

    def random_state(self, rng, scale=1.0):
        means = scale * rng.standard_normal((self.n_t, 2)) * 3
        G = rng.standard_normal((self.n_t, 2, 2))
        covs = G @ G.transpose(0, 2, 1) + 0.1 * np.eye(2)
        return np.concatenate([scale * rng.standard_normal(2), self.pack(means, covs)])


class TrackingWorld(World):
    """True targets follow Brownian motion with increments ``N(0, Q dt)``."""

    def __init__(self, model: TrackingModel, targets, rng):
        self.model = model
        self.q = np.array(targets, dtype=float)
        self.rng = rng
        self._Lq = psd_sqrt(model.Q)

    def step(self, u, dt):
        self.q = self.q + np.sqrt(dt) * self.rng.standard_normal(self.q.shape) @ self._Lq.T

    def observe(self, x_planner):
        m = self.model
        p = x_planner[:2]
        R = range_noise_cov(m.R0, m.R1, p[None], self.q)
        ys = np.empty(m.n_t)
        for i in range(m.n_t):
            v = psd_sqrt(R[i]) @ self.rng.standard_normal(2)
            ys[i] = np.linalg.norm(self.q[i] - p + v)
        return ys

    def metrics(self, x_planner):
        ent = self.model.entropies(x_planner)
        means, _ = self.model.beliefs(x_planner[2:])
        return {
            "worst_entropy": float(np.max(ent)),
            "mean_entropy": float(np.mean(ent)),
            "tracking_error": float(np.max(np.linalg.norm(means - self.q, axis=1))),
        }


class TrackingScenario(Scenario):
    name = "tracking"

    def __init__(self, cfg: TrackingConfig):
        self.cfg = cfg
        self.model = TrackingModel(cfg)
        self.targets = cfg.target_positions()
        self.initial_state = self.model.initial_state(cfg.robot_start, self.targets, cfg.initial_std)

    def make_world(self, rng):
        # Initial beliefs are centred on the true positions.
        return TrackingWorld(self.model, self.targets, rng)


def make_tracking_scenario(cfg: TrackingConfig | None = None) -> TrackingScenario:
    return TrackingScenario(cfg or TrackingConfig())
