"""Hybrid systems with time-driven switching.

The planner state ``x`` evolves by an ODE between observation epochs and
jumps through a Bayesian filter update at each epoch.  Time is discretised on
a control grid of step ``dt``; grid cell ``j`` is the left-open interval
``(t0 + j*dt, t0 + (j+1)*dt]`` and the explicit Euler step from grid point
``j`` to ``j+1`` uses the control of cell ``j``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .adjoint import jacobian

GRID_TOL = 1e-6


class RolloutDiverged(RuntimeError):
    """A rollout produced a non-finite state."""


def grid_steps(duration: float, dt: float, what: str = "duration") -> int:
    """Number of ``dt`` steps in ``duration``; raises if not an integer multiple."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    ratio = duration / dt
    n = int(round(ratio))
    if abs(ratio - n) > GRID_TOL * max(1.0, abs(ratio)):
        raise ValueError(f"{what}={duration!r} is not a multiple of dt={dt!r}")
    return n


class Policy(Protocol):
    def control(self, t: float, x: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class ControlSchedule:
    """Piecewise-constant open-loop control on a uniform grid."""

    t0: float
    dt: float
    values: np.ndarray
    box_lo: np.ndarray
    box_hi: np.ndarray

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        lo = np.asarray(self.box_lo, dtype=float).reshape(-1)
        hi = np.asarray(self.box_hi, dtype=float).reshape(-1)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if values.shape[0] == 0:
            raise ValueError("schedule must have at least one cell")
        if values.shape[1] != lo.size or lo.size != hi.size:
            raise ValueError("control dimension does not match the saturation box")
        if np.any(lo > hi):
            raise ValueError("box_lo must not exceed box_hi")
        tol = 1e-12 * (1.0 + np.abs(hi - lo))
        if np.any(values < lo - tol) or np.any(values > hi + tol):
            raise ValueError("schedule values violate the saturation box")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "box_lo", lo)
        object.__setattr__(self, "box_hi", hi)

    @classmethod
    def constant(cls, t0, dt, n_cells, value, box_lo, box_hi) -> "ControlSchedule":
        value = np.asarray(value, dtype=float)
        return cls(t0, dt, np.tile(value, (n_cells, 1)), box_lo, box_hi)

    @property
    def n_cells(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def t_end(self) -> float:
        return self.t0 + self.n_cells * self.dt

    def cell_index(self, t: float) -> int:
        """Index of the cell ``(t_j, t_j+1]`` containing ``t``; ``t0`` maps to cell 0."""
        s = (t - self.t0) / self.dt
        if s < -GRID_TOL or s > self.n_cells + GRID_TOL:
            raise ValueError(f"time {t!r} outside schedule span [{self.t0}, {self.t_end}]")
        k = int(round(s))
        j = k - 1 if abs(s - k) <= GRID_TOL else int(np.floor(s))
        return min(max(j, 0), self.n_cells - 1)

    def at(self, t: float) -> np.ndarray:
        return self.values[self.cell_index(t)]

    def control(self, t: float, x=None) -> np.ndarray:
        return self.values[self.cell_index(t)]

    def in_box(self, v) -> bool:
        v = np.asarray(v, dtype=float)
        tol = 1e-12 * (1.0 + np.abs(self.box_hi - self.box_lo))
        return bool(np.all(v >= self.box_lo - tol) and np.all(v <= self.box_hi + tol))


@dataclass(frozen=True)
class StatePolicy:
    """Closed-loop nominal policy ``u = clip(fn(x))``."""

    fn: object
    box_lo: np.ndarray
    box_hi: np.ndarray

    def control(self, t: float, x: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(self.fn(x), dtype=float), self.box_lo, self.box_hi)


@dataclass(frozen=True)
class PerturbedPolicy:
    """A closed-loop policy overridden by constant controls on windows ``(lo, hi]``.

    Windows are grid aligned; lookups are made at cell midpoints.
    """

    base: object
    windows: tuple = ()

    @property
    def box_lo(self):
        return self.base.box_lo

    @property
    def box_hi(self):
        return self.base.box_hi

    def control(self, t: float, x: np.ndarray) -> np.ndarray:
        for lo, hi, v in reversed(self.windows):
            if lo < t <= hi:
                return v
        return self.base.control(t, x)


def perturb_control(schedule: ControlSchedule, tau: float, v, eps: float) -> ControlSchedule:
    """Return ``schedule`` with value ``v`` on ``(tau - eps, tau]``.

    ``tau`` is snapped to the nearest grid point; every cell whose interval
    intersects the window is overwritten.
    """
    v = np.asarray(v, dtype=float).reshape(-1)
    if eps < 0:
        raise ValueError("eps must be non-negative")
    if v.size != schedule.m:
        raise ValueError("v has the wrong dimension")
    if not schedule.in_box(v):
        raise ValueError("v lies outside the saturation box")
    s_tau = (tau - schedule.t0) / schedule.dt
    if s_tau <= GRID_TOL or s_tau > schedule.n_cells + GRID_TOL:
        raise ValueError(f"tau={tau!r} outside schedule span")
    if eps == 0:
        return schedule
    j_hi = int(round(s_tau))
    s_lo = j_hi - eps / schedule.dt
    if s_lo < -GRID_TOL:
        raise ValueError("perturbation window starts before the schedule")
    k = int(round(s_lo))
    j_lo = k if abs(s_lo - k) <= GRID_TOL else int(np.floor(s_lo))
    values = np.array(schedule.values)
    values[max(j_lo, 0):j_hi] = v
    return ControlSchedule(schedule.t0, schedule.dt, values, schedule.box_lo, schedule.box_hi)


def with_window(nominal, lo: float, hi: float, v):
    """Apply constant ``v`` on ``(lo, hi]`` to a schedule or a policy."""
    if isinstance(nominal, ControlSchedule):
        return perturb_control(nominal, hi, v, hi - lo)
    v = np.asarray(v, dtype=float)
    if isinstance(nominal, PerturbedPolicy):
        return PerturbedPolicy(nominal.base, nominal.windows + ((lo, hi, v),))
    return PerturbedPolicy(nominal, ((lo, hi, v),))


def committed_prefix(plan, base, t0: float, t_calc: float, horizon: float, dt: float):
    """Nominal for a new planning epoch: ``plan`` on ``(t0, t0+t_calc]``, ``base`` after."""
    n_cells = grid_steps(horizon, dt, "horizon")
    n_fixed = grid_steps(t_calc, dt, "t_calc")
    if isinstance(base, ControlSchedule):
        values = np.array(base.values[:n_cells]) if base.n_cells >= n_cells else np.tile(base.values[-1], (n_cells, 1))
        for j in range(n_fixed):
            values[j] = plan.control(t0 + (j + 0.5) * dt, None)
        return ControlSchedule(t0, dt, values, base.box_lo, base.box_hi)
    windows = []
    if isinstance(plan, PerturbedPolicy):
        hi_fix = t0 + t_calc
        for lo, hi, v in plan.windows:
            lo2, hi2 = max(lo, t0), min(hi, hi_fix)
            if hi2 - lo2 > GRID_TOL * dt:
                windows.append((lo2, hi2, v))
    return PerturbedPolicy(base, tuple(windows)) if windows else base


class ScenarioModel:
    """Belief-space hybrid model.

    Subclasses supply the flow ``f(x, u) = drift(x) + H(x) u``, the filter
    jump ``g(x_pre, y)``, costs and an observation sampler.  Running cost is
    ``state_cost(x) + 0.5 u' C_u u`` with diagonal ``C_u``.  Jacobian-vector
    products default to dense Jacobians, numeric unless overridden.
    """

    kind = "general"
    n_x: int
    m: int
    control_cost: np.ndarray
    box_lo: np.ndarray
    box_hi: np.ndarray

    # flow
    def drift(self, x):
        raise NotImplementedError

    def control_matrix(self, x):
        raise NotImplementedError

    def flow(self, x, u):
        return self.drift(x) + self.control_matrix(x) @ u

    def flow_jac(self, x, u):
        return jacobian(lambda z: self.flow(z, u), x)

    def flow_vjp(self, x, u, r):
        return self.flow_jac(x, u).T @ r

    def flow_jvp(self, x, u, psi):
        return self.flow_jac(x, u) @ psi

    def flow_interval(self, x, u, n_steps: int, dt: float):
        """Euler-integrate ``n_steps`` with constant ``u``; returns (x_end, running cost)."""
        cost = 0.0
        for _ in range(n_steps):
            cost += dt * self.running_cost(x, u)
            x = x + dt * self.flow(x, u)
        return x, cost

    # jump
    def jump(self, x, y):
        raise NotImplementedError

    def jump_jac(self, x, y):
        return jacobian(lambda z: self.jump(z, y), x)

    def jump_vjp(self, x, y, r):
        return self.jump_jac(x, y).T @ r

    def jump_jvp(self, x, y, psi):
        return self.jump_jac(x, y) @ psi

    def sample_observation(self, x_pre, rng):
        raise NotImplementedError

    def predicted_observation(self, x_pre):
        raise NotImplementedError

    # costs
    def state_cost(self, x) -> float:
        return 0.0

    def state_cost_grad(self, x):
        return np.zeros(self.n_x)

    def control_cost_value(self, u) -> float:
        return 0.5 * float(u @ (self.control_cost * u))

    def running_cost(self, x, u) -> float:
        return self.state_cost(x) + self.control_cost_value(u)

    def running_cost_grad(self, x, u):
        return self.state_cost_grad(x)

    def terminal_cost(self, x) -> float:
        return 0.0

    def terminal_cost_grad(self, x):
        return np.zeros(self.n_x)

    def check_control_affine(self, rng, n_probes: int = 100, scale: float = 1.0) -> float:
        """Max relative violation of ``f(x,u) - f(x,0) = H(x) u`` over random probes."""
        worst = 0.0
        for _ in range(n_probes):
            x = self.random_state(rng, scale)
            u = rng.uniform(self.box_lo, self.box_hi)
            fu = self.flow(x, u)
            err = np.linalg.norm(fu - self.flow(x, np.zeros(self.m)) - self.control_matrix(x) @ u)
            worst = max(worst, err / (1.0 + np.linalg.norm(fu)))
        return worst

    def random_state(self, rng, scale: float = 1.0):
        raise NotImplementedError


class MixedModel(ScenarioModel):
    """Mixed observability: ``x = p (+) b`` with deterministic physical state ``p``.

    The belief is constant between epochs and the physical state is left
    unchanged by the jump.  Subclasses implement the ``phys_*`` and
    ``belief_jump*`` hooks; full-state methods are derived from them.
    """

    kind = "mixed"
    n_p: int

    @property
    def n_b(self) -> int:
        return self.n_x - self.n_p

    def split(self, x):
        return x[: self.n_p], x[self.n_p:]

    def phys_drift(self, p):
        raise NotImplementedError

    def phys_control_matrix(self, p):
        raise NotImplementedError

    def phys_flow(self, p, u):
        return self.phys_drift(p) + self.phys_control_matrix(p) @ u

    def phys_flow_jac(self, p, u):
        return jacobian(lambda z: self.phys_flow(z, u), p)

    def belief_jump(self, p, b, y):
        raise NotImplementedError

    def belief_jump_jac(self, p, b, y):
        """Returns ``(dg/dp, dg/db)``."""
        n_p = self.n_p
        full = jacobian(lambda z: self.belief_jump(z[:n_p], z[n_p:], y), np.concatenate([p, b]))
        return full[:, :n_p], full[:, n_p:]

    def drift(self, x):
        return np.concatenate([self.phys_drift(x[: self.n_p]), np.zeros(self.n_b)])

    def control_matrix(self, x):
        H = np.zeros((self.n_x, self.m))
        H[: self.n_p] = self.phys_control_matrix(x[: self.n_p])
        return H

    def flow(self, x, u):
        return np.concatenate([self.phys_flow(x[: self.n_p], u), np.zeros(self.n_b)])

    def flow_jac(self, x, u):
        J = np.zeros((self.n_x, self.n_x))
        J[: self.n_p, : self.n_p] = self.phys_flow_jac(x[: self.n_p], u)
        return J

    def flow_vjp(self, x, u, r):
        out = np.zeros(self.n_x)
        out[: self.n_p] = self.phys_flow_jac(x[: self.n_p], u).T @ r[: self.n_p]
        return out

    def flow_jvp(self, x, u, psi):
        out = np.zeros(self.n_x)
        out[: self.n_p] = self.phys_flow_jac(x[: self.n_p], u) @ psi[: self.n_p]
        return out

    def jump(self, x, y):
        p, b = self.split(x)
        return np.concatenate([p, self.belief_jump(p, b, y)])

    def jump_jac(self, x, y):
        p, b = self.split(x)
        Jp, Jb = self.belief_jump_jac(p, b, y)
        J = np.eye(self.n_x)
        J[self.n_p:, : self.n_p] = Jp
        J[self.n_p:, self.n_p:] = Jb
        return J

    def jump_vjp(self, x, y, r):
        p, b = self.split(x)
        Jp, Jb = self.belief_jump_jac(p, b, y)
        rp, rb = r[: self.n_p], r[self.n_p:]
        return np.concatenate([rp + Jp.T @ rb, Jb.T @ rb])

    def jump_jvp(self, x, y, psi):
        p, b = self.split(x)
        Jp, Jb = self.belief_jump_jac(p, b, y)
        sp, sb = psi[: self.n_p], psi[self.n_p:]
        return np.concatenate([sp, Jp @ sp + Jb @ sb])


@dataclass
class HybridTrajectory:
    """Nominal rollout on the control grid.

    ``states[j]`` is the (post-jump) state at grid point ``j``; the jump for
    observation ``k`` happens at grid index ``jump_indices[k]`` from the stored
    left limit ``pre_jump_states[k]``.  ``running_cost[j]`` accumulates the
    left-Riemann sum of the running cost up to grid point ``j``.
    """

    t0: float
    dt: float
    dt_obs: float
    states: np.ndarray
    controls: np.ndarray
    jump_indices: np.ndarray
    pre_jump_states: np.ndarray
    observations: list
    running_cost: np.ndarray

    @property
    def grid_times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.states.shape[0])

    @property
    def n_steps(self) -> int:
        return self.controls.shape[0]

    def epoch_of(self, j: int):
        """Observation index whose jump happens at grid point ``j``, else None."""
        per = self.steps_per_obs
        if j > 0 and j % per == 0 and j // per <= len(self.jump_indices):
            return j // per - 1
        return None

    @property
    def steps_per_obs(self) -> int:
        return grid_steps(self.dt_obs, self.dt, "dt_obs")


def _check_finite(x, where):
    if not np.all(np.isfinite(x)):
        raise RolloutDiverged(f"non-finite state {where}")


def euler_flow(model: ScenarioModel, x0, schedule, t0: float, t1: float) -> np.ndarray:
    """Explicit-Euler path of the continuous flow from ``t0`` to ``t1`` (no jumps)."""
    dt = schedule.dt
    n = grid_steps(t1 - t0, dt, "t1 - t0")
    if n < 0:
        raise ValueError("t1 must not precede t0")
    x = np.asarray(x0, dtype=float)
    path = np.empty((n + 1, x.size))
    path[0] = x
    for j in range(n):
        u = schedule.control(t0 + (j + 0.5) * dt, x)
        x = x + dt * model.flow(x, u)
        _check_finite(x, f"at t={t0 + (j + 1) * dt:.6g}")
        path[j + 1] = x
    return path


def simulate_nominal(
    model: ScenarioModel,
    x0,
    nominal,
    horizon: float,
    seed=None,
    *,
    dt_ctrl: float,
    dt_obs: float,
    t0: float = 0.0,
    observations: Sequence | None = None,
    rng: np.random.Generator | None = None,
) -> HybridTrajectory:
    """Forward-simulate the hybrid system under ``nominal``.

    Observations are sampled from the model's generative sampler at each
    epoch unless ``observations`` is given, in which case they are replayed.
    ``nominal`` is a :class:`ControlSchedule` or any object with
    ``control(t, x)``; it is queried at cell midpoints with the current state.
    """
    per = grid_steps(dt_obs, dt_ctrl, "dt_obs")
    K = grid_steps(horizon, dt_ctrl, "horizon")
    if K % per:
        raise ValueError("horizon must be a multiple of dt_obs")
    T = K // per
    if rng is None:
        rng = np.random.default_rng(seed)
    x = np.array(x0, dtype=float)
    n = x.size
    states = np.empty((K + 1, n))
    controls = np.empty((K, model.m))
    running = np.zeros(K + 1)
    pre = np.empty((T, n))
    obs = []
    states[0] = x
    dt = dt_ctrl
    for j in range(K):
        u = nominal.control(t0 + (j + 0.5) * dt, x)
        controls[j] = u
        running[j + 1] = running[j] + dt * model.running_cost(x, u)
        x = x + dt * model.flow(x, u)
        if (j + 1) % per == 0:
            k = (j + 1) // per - 1
            _check_finite(x, f"before jump {k}")
            pre[k] = x
            y = observations[k] if observations is not None else model.sample_observation(x, rng)
            obs.append(y)
            x = model.jump(x, y)
        _check_finite(x, f"at grid point {j + 1}")
        states[j + 1] = x
    return HybridTrajectory(
        t0=t0,
        dt=dt,
        dt_obs=dt_obs,
        states=states,
        controls=controls,
        jump_indices=per * np.arange(1, T + 1),
        pre_jump_states=pre,
        observations=obs,
        running_cost=running,
    )


def total_cost(traj: HybridTrajectory, model: ScenarioModel) -> float:
    """Left-Riemann running cost plus terminal cost at the final post-jump state."""
    value = float(traj.running_cost[-1]) + float(model.terminal_cost(traj.states[-1]))
    if not np.isfinite(value):
        raise RolloutDiverged("non-finite total cost")
    return value
