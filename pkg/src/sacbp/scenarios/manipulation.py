"""Planar object manipulation with unknown inertial and friction parameters.

Latent state (11): position ``r`` (2), heading ``theta``, velocity ``v`` (2),
angular rate ``omega``, then the static parameters ``log m``, ``log I``,
arm ``(a_x, a_y)`` and ``log c_f``.  Control is ``(F_x, F_y, M)``:

    r' = v,  theta' = omega,  v' = (F - c_f v) / m,
    omega' = (M + a_x F_y - a_y F_x) / I.

A continuous-discrete EKF over this state is the planner's belief (mean plus
column-major covariance, 132 entries).  The robot holds the object at the
body point ``a`` and senses its own pose, twist and the control-free part
of its acceleration, so the filter jump does not depend on the control.

Dynamics, Jacobians and the EKF run as jitted JAX functions in double
precision; the same ``f_sys`` drives the ground-truth simulator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from ..filters import ekf_update_arrays, project_psd, psd_sqrt, sym_sqrt
from ..hybrid import ControlSchedule, PerturbedPolicy, ScenarioModel
from .base import Scenario, World

jax.config.update("jax_enable_x64", True)

N_STATE = 11
N_OBJ = 6
N_BELIEF = N_STATE + N_STATE * N_STATE


def f_sys(x, u):
    v, w = x[3:5], x[5]
    m, inertia, cf = jnp.exp(x[6]), jnp.exp(x[7]), jnp.exp(x[10])
    ax, ay = x[8], x[9]
    vdot = (u[:2] - cf * v) / m
    wdot = (u[2] + ax * u[1] - ay * u[0]) / inertia
    return jnp.concatenate([v, x[5:6], vdot, jnp.reshape(wdot, (1,)), jnp.zeros(5, dtype=x.dtype)])


def h_obs(x):
    """Pose, twist and drift acceleration of the rigidly attached robot.

    Returns ``(position, heading, velocity, angular rate, acceleration)`` of
    the attachment point ``r + R(theta) a``.
    """
    c, s = jnp.cos(x[2]), jnp.sin(x[2])
    arm = jnp.array([c * x[8] - s * x[9], s * x[8] + c * x[9]])
    perp = jnp.array([-arm[1], arm[0]])
    w = x[5]
    cf_over_m = jnp.exp(x[10] - x[6])
    pos = x[:2] + arm
    vel = x[3:5] + w * perp
    acc = -cf_over_m * x[3:5] - w * w * arm
    return jnp.concatenate([pos, x[2:3], vel, x[5:6], acc])


def _unpack(b):
    return b[:N_STATE], b[N_STATE:].reshape(N_STATE, N_STATE).T


def _pack(mu, S):
    return jnp.concatenate([mu, S.T.reshape(-1)])


@dataclass
class ManipulationConfig:
    mass: float = 2.0
    inertia: float = 1.0
    arm: list = field(default_factory=lambda: [0.3, -0.2])
    friction: float = 0.8
    prior_mass: float = 1.5
    prior_inertia: float = 0.7
    prior_arm: list = field(default_factory=lambda: [0.25, -0.15])
    prior_friction: float = 0.5
    prior_log_std: float = 0.4
    prior_arm_std: float = 0.05
    initial_pose: list = field(default_factory=lambda: [1.5, -1.0, 0.6])
    initial_state_std: float = 0.05
    sensor_std: list = field(default_factory=lambda: [0.01, 0.05, 0.2])
    process_std: list = field(default_factory=lambda: [0.002, 0.002, 0.01, 0.01])
    C_x: list = field(default_factory=lambda: [10.0, 10.0, 1.0, 1.0, 1.0, 1.0])
    C_u: list = field(default_factory=lambda: [0.2, 0.2, 0.2])
    force_limit: float = 3.0
    torque_limit: float = 1.0
    gains: list = field(default_factory=lambda: [3.0, 3.0, 1.0, 1.5])

    def __post_init__(self):
        for name in ("mass", "inertia", "friction", "prior_mass", "prior_inertia", "prior_friction"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if np.any(np.asarray(self.C_x) < 0):
            raise ValueError("C_x must be PSD")
        if np.any(np.asarray(self.C_u) <= 0):
            raise ValueError("C_u must be diagonal positive definite")
        if len(self.C_x) != N_OBJ or len(self.C_u) != 3:
            raise ValueError("C_x needs 6 entries and C_u 3 entries")
        if self.force_limit <= 0 or self.torque_limit <= 0:
            raise ValueError("control limits must be positive")

    def true_params(self) -> np.ndarray:
        return np.array([np.log(self.mass), np.log(self.inertia), *self.arm, np.log(self.friction)])

    def prior_mean(self) -> np.ndarray:
        obj = np.zeros(N_OBJ)
        obj[:3] = self.initial_pose
        params = [np.log(self.prior_mass), np.log(self.prior_inertia), *self.prior_arm, np.log(self.prior_friction)]
        return np.concatenate([obj, params])

    def prior_cov(self) -> np.ndarray:
        s = self.initial_state_std
        std = [s] * N_OBJ + [self.prior_log_std] * 2 + [self.prior_arm_std] * 2 + [self.prior_log_std]
        return np.diag(np.square(std))

    def process_cov(self) -> np.ndarray:
        p_pos, p_th, p_v, p_w = self.process_std
        return np.diag(np.square([p_pos, p_pos, p_th, p_v, p_v, p_w] + [0.0] * 5))

    def sensor_cov(self) -> np.ndarray:
        sp, sv, sa = self.sensor_std
        return np.diag(np.square([sp, sp, sp, sv, sv, sv, sa, sa]))

    def box(self):
        hi = np.array([self.force_limit, self.force_limit, self.torque_limit])
        return -hi, hi


class ManipulationModel(ScenarioModel):
    """General belief-space model over the packed EKF belief."""

    kind = "general"

    def __init__(self, cfg: ManipulationConfig):
        self.cfg = cfg
        self.n = N_STATE
        self.n_x = N_BELIEF
        self.m = 3
        self.control_cost = np.asarray(cfg.C_u, dtype=float)
        self.box_lo, self.box_hi = cfg.box()
        self.Cx_diag = np.concatenate([np.asarray(cfg.C_x, float), np.zeros(N_STATE - N_OBJ)])
        self.Q = cfg.process_cov()
        self.R = cfg.sensor_cov()
        self._LR = np.linalg.cholesky(self.R)
        Q = jnp.asarray(self.Q)
        R = jnp.asarray(self.R)

        def belief_flow(b, u):
            mu, S = _unpack(b)
            A = jax.jacfwd(f_sys)(mu, u)
            return _pack(f_sys(mu, u), A @ S + S @ A.T + Q)

        def jump(b, y):
            mu, S = _unpack(b)
            Hm = jax.jacfwd(h_obs)(mu)
            mu2, S2 = ekf_update_arrays(mu, S, y, h_obs(mu), Hm, R, xp=jnp, joseph=True)
            return _pack(mu2, S2)

        def flow_vjp(b, u, r):
            return jax.vjp(lambda z: belief_flow(z, u), b)[1](r)[0]

        def flow_jvp(b, u, psi):
            return jax.jvp(lambda z: belief_flow(z, u), (b,), (psi,))[1]

        def jump_vjp(b, y, r):
            return jax.vjp(lambda z: jump(z, y), b)[1](r)[0]

        def jump_jvp(b, y, psi):
            return jax.jvp(lambda z: jump(z, y), (b,), (psi,))[1]

        def control_matrix(b):
            return jax.jacfwd(lambda u: belief_flow(b, u))(jnp.zeros(3, dtype=b.dtype))


        def flow_interval(b, u, n_steps, dt):
            def body(_, carry):
                z, cost = carry
                mu, S = _unpack(z)
                c = self._cost_jax(mu, S) + 0.5 * jnp.dot(u, jnp.asarray(self.control_cost) * u)
                return z + dt * belief_flow(z, u), cost + dt * c

            return jax.lax.fori_loop(0, n_steps, body, (b, jnp.zeros((), dtype=b.dtype)))

        self._flow = jax.jit(belief_flow)
        self._jump = jax.jit(jump)
        self._flow_vjp = jax.jit(flow_vjp)
        self._flow_jvp = jax.jit(flow_jvp)
        self._jump_vjp = jax.jit(jump_vjp)
        self._jump_jvp = jax.jit(jump_jvp)
        self._jump_jac = jax.jit(jax.jacfwd(jump))
        self._flow_jac = jax.jit(jax.jacfwd(belief_flow))
        self._control_matrix = jax.jit(control_matrix)
        self._h = jax.jit(h_obs)
        self._f_sys = jax.jit(f_sys)
        self._flow_interval = jax.jit(flow_interval, static_argnums=(2,))
        self._belief_flow = belief_flow
        self._jump_fn = jump
        self._batched = {}

    def _cost_jax(self, mu, S):
        C = jnp.asarray(self.Cx_diag)
        return 0.5 * jnp.dot(mu, C * mu) + 0.5 * jnp.dot(C, jnp.diagonal(S))

    @staticmethod
    def _np(a):
        return np.asarray(a)

    # flow
    def flow(self, x, u):
        return self._np(self._flow(x, np.asarray(u, dtype=float)))

    def drift(self, x):
        return self.flow(x, np.zeros(3))

    def control_matrix(self, x):
        return self._np(self._control_matrix(x))

    def flow_jac(self, x, u):
        return self._np(self._flow_jac(x, np.asarray(u, dtype=float)))

    def flow_vjp(self, x, u, r):
        return self._np(self._flow_vjp(x, np.asarray(u, dtype=float), r))

    def flow_jvp(self, x, u, psi):
        return self._np(self._flow_jvp(x, np.asarray(u, dtype=float), psi))

    def flow_interval(self, x, u, n_steps, dt):
        z, cost = self._flow_interval(x, np.asarray(u, dtype=float), int(n_steps), float(dt))
        return self._np(z), float(cost)

    # jump
    def jump(self, x, y):
        return self._np(self._jump(x, np.asarray(y, dtype=float)))

    def jump_jac(self, x, y):
        return self._np(self._jump_jac(x, np.asarray(y, dtype=float)))

    def jump_vjp(self, x, y, r):
        return self._np(self._jump_vjp(x, np.asarray(y, dtype=float), r))

    def jump_jvp(self, x, y, psi):
        return self._np(self._jump_jvp(x, np.asarray(y, dtype=float), psi))

    def measure(self, latent):
        return self._np(self._h(np.asarray(latent, dtype=float)))

    def true_flow(self, latent, u):
        return self._np(self._f_sys(np.asarray(latent, dtype=float), np.asarray(u, dtype=float)))

    def sample_observation(self, x_pre, rng):
        mu, S = self.unpack(x_pre)
        latent = mu + sym_sqrt(S) @ rng.standard_normal(N_STATE)
        return self.measure(latent) + self._LR @ rng.standard_normal(self.R.shape[0])

    def predicted_observation(self, x_pre):
        return self.measure(x_pre[:N_STATE])

    # batched Monte Carlo passes
    def _control_arrays(self, nominal, t0, n_cells, dt):
        """Encode a supported nominal as (override mask, override values, PD gains)."""
        mask = np.zeros(n_cells, dtype=bool)
        vals = np.zeros((n_cells, self.m))
        mids = t0 + (np.arange(n_cells) + 0.5) * dt
        if isinstance(nominal, ControlSchedule):
            mask[:] = True
            vals[:] = [nominal.control(t, None) for t in mids]
            return mask, vals, np.zeros(4)
        windows = ()
        if isinstance(nominal, PerturbedPolicy):
            windows, nominal = nominal.windows, nominal.base
        if not isinstance(nominal, PositionPolicy):
            return None
        for lo, hi, v in windows:
            inside = (mids > lo) & (mids <= hi)
            mask |= inside
            vals[inside] = v
        return mask, vals, np.asarray(nominal.gains, dtype=float)

    def _batched_fn(self, per, T):
        key = (per, T)
        if key in self._batched:
            return self._batched[key]
        flow, jump = self._belief_flow, self._jump_fn
        Cx = jnp.asarray(self.Cx_diag)
        Cu = jnp.asarray(self.control_cost)
        LR = jnp.asarray(self._LR)
        lo, hi = jnp.asarray(self.box_lo), jnp.asarray(self.box_hi)
        diag_idx = N_STATE + jnp.arange(N_STATE) * (N_STATE + 1)

        def cost_grad(x):
            return jnp.zeros(N_BELIEF, dtype=x.dtype).at[:N_STATE].set(Cx * x[:N_STATE]).at[diag_idx].set(0.5 * Cx)

        def one(x0, mask, vals, gains, Z, dt, tau_idx):
            kp, kd, kth, kw = gains[0], gains[1], gains[2], gains[3]

            def policy(x, j):
                mu = x[:N_STATE]
                pd = jnp.array([-kp * mu[0] - kd * mu[3], -kp * mu[1] - kd * mu[4], -kth * mu[2] - kw * mu[5]])
                return jnp.where(mask[j], vals[j], jnp.clip(pd, lo, hi))

            def epoch(x, k):
                def step(x, i):
                    u = policy(x, k * per + i)
                    return x + dt * flow(x, u), (x, u)

                x_pre, (xs, us) = jax.lax.scan(step, x, jnp.arange(per))
                mu, S = _unpack(x_pre)
                y = h_obs(mu + sym_sqrt(S, xp=jnp) @ Z[k, :N_STATE]) + LR @ Z[k, N_STATE:]
                return jump(x_pre, y), (xs, us, x_pre, y)

            xK, (xs, us, pres, ys) = jax.lax.scan(epoch, x0, jnp.arange(T))

            def bepoch(r, inp):
                xs_k, us_k, pre, y = inp
                r = jax.vjp(lambda z: jump(z, y), pre)[1](r)[0]
                left = r

                def bstep(r, xu):
                    x, u = xu
                    r = r + dt * (cost_grad(x) + jax.vjp(lambda z: flow(z, u), x)[1](r)[0])
                    return r, r

                r, rhos = jax.lax.scan(bstep, r, (xs_k, us_k), reverse=True)
                return r, (left, rhos)

            rK = cost_grad(xK)
            _, (lefts, rhos) = jax.lax.scan(bepoch, rK, (xs, us, pres, ys), reverse=True)
            xs = xs.reshape(T * per, N_BELIEF)
            us = us.reshape(T * per, self.m)
            rho = jnp.concatenate([rhos.reshape(T * per, N_BELIEF), rK[None]], axis=0)
            at_epoch = (tau_idx % per) == 0
            r_tau = jnp.where(at_epoch[:, None], lefts[jnp.maximum(tau_idx // per - 1, 0)], rho[tau_idx])
            x_tau, u_tau = xs[tau_idx - 1], us[tau_idx - 1]

            def coef(x, u, r):
                g = jax.vjp(lambda w: flow(x, w), u)[1](r)[0]
                return g, g @ u + 0.5 * u @ (Cu * u)

            lin, const = jax.vmap(coef)(x_tau, u_tau, r_tau)
            ok = jnp.all(jnp.isfinite(rho)) & jnp.all(jnp.isfinite(xs)) & jnp.all(jnp.isfinite(xK))
            return lin, const, r_tau, u_tau, ok

        fn = jax.jit(jax.vmap(one, in_axes=(None, None, None, None, 0, None, None)))
        self._batched[key] = fn
        return fn

    def batched_coefficients(self, x0, nominal, params, t0, seeds, tau_idx):
        """All Monte Carlo forward/backward passes of one update as a single jitted call.

        Returns per-sample ``(lin, const, rho, u)`` tuples (``None`` for a
        failed sample), or ``None`` if the nominal is not representable.
        Observation noise uses the same random stream as :meth:`sample_observation`.
        """
        per = params.steps_per_obs
        K = params.n_steps
        T = K // per
        enc = self._control_arrays(nominal, t0, K, params.dt_ctrl)
        if enc is None:
            return None
        mask, vals, gains = enc
        Z = np.stack([np.random.default_rng(s).standard_normal((T, N_STATE + self.R.shape[0])) for s in seeds])
        fn = self._batched_fn(per, T)
        lin, const, rho, u, ok = fn(np.asarray(x0, float), mask, vals, gains, Z, float(params.dt_ctrl),
                                    np.asarray(tau_idx))
        lin, const, rho, u, ok = map(np.asarray, (lin, const, rho, u, ok))
        return [(lin[i], const[i], rho[i], u[i]) if ok[i] else None for i in range(len(seeds))]

    # packing helpers
    def unpack(self, x):
        x = np.asarray(x, dtype=float)
        return x[:N_STATE].copy(), x[N_STATE:].reshape(N_STATE, N_STATE).T.copy()

    def pack(self, mu, S):
        return np.concatenate([np.asarray(mu, float), np.asarray(S, float).T.ravel()])

    # costs
    def state_cost(self, x):
        C = self.Cx_diag
        mu = x[:N_STATE]
        diag = x[N_STATE:][:: N_STATE + 1]
        return 0.5 * float(mu @ (C * mu)) + 0.5 * float(C @ diag)

    def state_cost_grad(self, x):
        g = np.zeros(N_BELIEF)
        g[:N_STATE] = self.Cx_diag * x[:N_STATE]
        g[N_STATE:][:: N_STATE + 1] = 0.5 * self.Cx_diag
        return g

    def terminal_cost(self, x):
        return self.state_cost(x)

    def terminal_cost_grad(self, x):
        return self.state_cost_grad(x)

    def random_state(self, rng, scale=1.0):
        mu = self.cfg.prior_mean() + scale * rng.standard_normal(N_STATE) * 0.3
        G = rng.standard_normal((N_STATE, N_STATE)) * 0.1
        return self.pack(mu, G @ G.T + 0.01 * np.eye(N_STATE))


def position_gains(cfg: ManipulationConfig):
    return np.asarray(cfg.gains, dtype=float)


@dataclass(frozen=True)
class PositionPolicy:
    """Closed-loop nominal: PD position controller on the belief mean."""

    gains: tuple
    box_lo: np.ndarray
    box_hi: np.ndarray

    def control(self, t, x):
        from ..baselines import position_controller

        return position_controller(np.asarray(x)[:N_STATE], self.gains, self.box_lo, self.box_hi)


class ManipulationWorld(World):
    """Ground truth with Brownian process noise ``N(0, Q dt)`` on the object state."""

    def __init__(self, model: ManipulationModel, latent, rng):
        self.model = model
        self.x = np.array(latent, dtype=float)
        self.rng = rng
        self._Lq = psd_sqrt(model.Q)
        self._Lr = psd_sqrt(model.R)

    def step(self, u, dt):
        self.x = self.x + dt * self.model.true_flow(self.x, u) + np.sqrt(dt) * (self._Lq @ self.rng.standard_normal(N_STATE))

    def observe(self, x_planner):
        return self.model.measure(self.x) + self._Lr @ self.rng.standard_normal(self._Lr.shape[0])

    def metrics(self, x_planner):
        return {
            "residual_norm": float(np.linalg.norm(self.x[:N_OBJ])),
            "estimate_error": float(np.linalg.norm(x_planner[:N_OBJ] - self.x[:N_OBJ])),
        }


class ManipulationScenario(Scenario):
    name = "manipulation"

    def __init__(self, cfg: ManipulationConfig):
        self.cfg = cfg
        self.model = ManipulationModel(cfg)
        self.initial_state = self.model.pack(cfg.prior_mean(), cfg.prior_cov())
        self.nominal_policy = PositionPolicy(tuple(cfg.gains), self.model.box_lo, self.model.box_hi)

    def make_world(self, rng):
        """Initial object state drawn from the prior; parameters at their true values."""
        cfg = self.cfg
        mu, S = cfg.prior_mean(), cfg.prior_cov()
        latent = np.concatenate([mu[:N_OBJ] + np.sqrt(np.diag(S)[:N_OBJ]) * rng.standard_normal(N_OBJ), cfg.true_params()])
        return ManipulationWorld(self.model, latent, rng)

    def base_nominal(self, t0, n_cells, dt):
        return self.nominal_policy

    def filter_jump(self, x, y):
        """EKF update of the executed belief, then projection of the covariance onto the PSD cone.

        Euler steps of the covariance ODE can leave it slightly indefinite
        under large control-dependent Jacobians; the projection is a no-op
        otherwise.
        """
        mu, S = self.model.unpack(self.model.jump(x, y))
        return self.model.pack(mu, project_psd(S))


def make_manipulation_scenario(cfg: ManipulationConfig | None = None) -> ManipulationScenario:
    return ManipulationScenario(cfg or ManipulationConfig())
