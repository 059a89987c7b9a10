"""Comparison planners: terminal-cost greedy descent, MCTS with double
progressive widening in belief space, and a PD position controller."""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .adjoint import adjoint_backward
from .filters import FilterError, GaussianBelief
from .hybrid import ControlSchedule, grid_steps, simulate_nominal, with_window


# --- position controller ----------------------------------------------------


def position_controller(belief, gains, box_lo=None, box_hi=None) -> np.ndarray:
    """PD law on the mean pose ``(r, theta)`` and rates ``(v, omega)`` toward the origin.

    ``gains = (k_p, k_d, k_theta, k_omega)``; output ``(F_x, F_y, M)`` is
    clamped to the box when one is given.
    """
    mean = belief.mean if isinstance(belief, GaussianBelief) else np.asarray(belief, dtype=float)
    kp, kd, kth, kw = np.asarray(gains, dtype=float)
    u = np.array([
        -kp * mean[0] - kd * mean[3],
        -kp * mean[1] - kd * mean[4],
        -kth * mean[2] - kw * mean[5],
    ])
    if box_lo is not None:
        u = np.clip(u, box_lo, box_hi)
    return u


# --- greedy -------------------------------------------------------------------


class _TerminalOnly:
    """View of a model with the running cost removed."""

    def __init__(self, model):
        self._model = model

    def __getattr__(self, name):
        return getattr(self._model, name)

    def running_cost(self, x, u):
        return 0.0

    def running_cost_grad(self, x, u):
        return np.zeros(self._model.n_x)


def _one_interval(model, x, u, dt_obs, dt_ctrl, t0=0.0):
    """Flow ``dt_obs`` under constant ``u`` and jump with the predicted observation."""
    per = grid_steps(dt_obs, dt_ctrl)
    sched = ControlSchedule.constant(t0, dt_ctrl, per, u, model.box_lo, model.box_hi)
    x_pre, _ = model.flow_interval(np.asarray(x, float), np.asarray(u, float), per, dt_ctrl)
    y = model.predicted_observation(x_pre)
    return sched, y


def greedy_gradient(x, model, *, dt_obs, dt_ctrl) -> np.ndarray:
    """``d/du h(g(x(t0 + dt_obs), y_hat))`` at ``u = 0`` through the Euler flow."""
    zero = np.zeros(model.m)
    sched, y = _one_interval(model, x, zero, dt_obs, dt_ctrl)
    view = _TerminalOnly(model)
    traj = simulate_nominal(view, x, sched, dt_obs, dt_ctrl=dt_ctrl, dt_obs=dt_obs, observations=[y])
    adj = adjoint_backward(traj, view)
    grad = np.zeros(model.m)
    for j in range(traj.n_steps):
        grad += dt_ctrl * model.control_matrix(traj.states[j]).T @ adj.before(j + 1)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite greedy gradient")
    return grad


def terminal_after_interval(x, u, model, *, dt_obs, dt_ctrl) -> float:
    per = grid_steps(dt_obs, dt_ctrl)
    x_pre, _ = model.flow_interval(np.asarray(x, float), np.asarray(u, float), per, dt_ctrl)
    return float(model.terminal_cost(model.jump(x_pre, model.predicted_observation(x_pre))))


def greedy_control(x, model, *, dt_obs, dt_ctrl, eta0: float = 1.0, max_halvings: int = 10) -> np.ndarray:
    """Clamped gradient step on the terminal cost after one observation interval.

    Backtracking starts at ``eta0`` and halves until the predicted terminal
    cost decreases; zero control is returned when no step helps.
    """
    grad = greedy_gradient(x, model, dt_obs=dt_obs, dt_ctrl=dt_ctrl)
    zero = np.zeros(model.m)
    if not np.any(grad):
        return zero
    h0 = terminal_after_interval(x, zero, model, dt_obs=dt_obs, dt_ctrl=dt_ctrl)
    eta = eta0
    for _ in range(max_halvings + 1):
        u = np.clip(-eta * grad, model.box_lo, model.box_hi)
        if terminal_after_interval(x, u, model, dt_obs=dt_obs, dt_ctrl=dt_ctrl) < h0:
            return u
        eta *= 0.5
    return zero


# --- MCTS with double progressive widening ------------------------------------


@dataclass
class DPWParams:
    n_queries: int = 100
    depth: int = 10
    c_ucb: float = 1.0
    k_action: float = 10.0
    alpha_action: float = 0.5
    k_state: float = 4.0
    alpha_state: float = 0.25
    gamma: float = 1.0
    dt_obs: float = 0.2
    dt_ctrl: float = 0.01
    rollout_policy: Optional[Callable] = None
    candidate_actions: Optional[list] = None

    def __post_init__(self):
        if self.n_queries < 1 or self.depth < 1:
            raise ValueError("n_queries and depth must be at least 1")
        if not (0 < self.alpha_action < 1 and 0 < self.alpha_state < 1):
            raise ValueError("widening exponents must lie in (0, 1)")
        if self.k_action <= 0 or self.k_state <= 0:
            raise ValueError("widening constants must be positive")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        grid_steps(self.dt_obs, self.dt_ctrl, "dt_obs")


@dataclass
class _StateNode:
    x: np.ndarray
    h: float
    visits: int = 0
    actions: list = field(default_factory=list)


@dataclass
class _ActionNode:
    u: np.ndarray
    visits: int = 0
    value: float = 0.0
    children: list = field(default_factory=list)  # [state node, reward, count]


class _Search:
    def __init__(self, model, params: DPWParams, rng):
        self.model = model
        self.p = params
        self.rng = rng
        self.per = grid_steps(params.dt_obs, params.dt_ctrl)

    def transition(self, x, h, u):
        m = self.model
        x_pre, cost = m.flow_interval(x, u, self.per, self.p.dt_ctrl)
        try:
            y = m.sample_observation(x_pre, self.rng)
        except (np.linalg.LinAlgError, FilterError):
            # Degenerate belief deep in the tree: fall back to the noise-free observation.
            y = m.predicted_observation(x_pre)
        x_new = m.jump(x_pre, y)
        h_new = float(m.terminal_cost(x_new))
        return x_new, h_new, -cost - (h_new - h)

    def rollout(self, x, h, depth):
        total, disc = 0.0, 1.0
        for _ in range(depth):
            u = self.p.rollout_policy(x) if self.p.rollout_policy is not None else np.zeros(self.model.m)
            u = np.clip(u, self.model.box_lo, self.model.box_hi)
            x, h, r = self.transition(x, h, u)
            total += disc * r
            disc *= self.p.gamma
        return total

    def new_action(self, node):
        cands = self.p.candidate_actions
        if cands is not None:
            if len(node.actions) >= len(cands):
                return
            u = np.asarray(cands[len(node.actions)], dtype=float)
        else:
            u = self.rng.uniform(self.model.box_lo, self.model.box_hi)
        node.actions.append(_ActionNode(u))

    def simulate(self, node, depth):
        if depth == 0:
            return 0.0
        p = self.p
        node.visits += 1
        if len(node.actions) < math.ceil(p.k_action * node.visits**p.alpha_action):
            self.new_action(node)
        log_n = math.log(node.visits)
        best, best_score = None, -math.inf
        for a in node.actions:
            if a.visits == 0:
                best = a
                break
            score = a.value + p.c_ucb * math.sqrt(log_n / a.visits)
            if score > best_score:
                best, best_score = a, score
        a = best
        a.visits += 1
        if len(a.children) < math.ceil(p.k_state * a.visits**p.alpha_state):
            x_new, h_new, r = self.transition(node.x, node.h, a.u)
            child = _StateNode(x_new, h_new)
            a.children.append([child, r, 1])
            total = r + p.gamma * self.rollout(x_new, h_new, depth - 1)
        else:
            counts = np.array([c[2] for c in a.children], dtype=float)
            k = int(self.rng.choice(len(a.children), p=counts / counts.sum()))
            entry = a.children[k]
            entry[2] += 1
            total = entry[1] + p.gamma * self.simulate(entry[0], depth - 1)
        a.value += (total - a.value) / a.visits
        return total


def mcts_dpw_plan(x, model, params: DPWParams, seed, *, return_tree: bool = False):
    """Root action with the highest visit count after ``n_queries`` simulations.

    Rewards telescope the terminal cost, ``-(interval cost) - (h(x') - h(x))``,
    so an undiscounted full-depth return equals the negative total cost.
    Visit-count ties go to the higher mean return, then to the earliest action.
    """
    rng = np.random.default_rng(seed)
    search = _Search(model, params, rng)
    x = np.asarray(x, dtype=float)
    root = _StateNode(x, float(model.terminal_cost(x)))
    for _ in range(params.n_queries):
        search.simulate(root, params.depth)
    best = max(range(len(root.actions)), key=lambda i: (root.actions[i].visits, root.actions[i].value, -i))
    u = np.clip(root.actions[best].u, model.box_lo, model.box_hi)
    return (u, root) if return_tree else u


def calibrate_n_queries(x, model, params: DPWParams, target_seconds: float, *, seed=0, probe_queries: int = 16,
                       repeats: int = 3) -> int:
    """Largest query count whose planning time fits ``target_seconds``.

    Times ``probe_queries``-query searches from ``x`` (after one warm-up) and
    assumes cost linear in the number of queries.
    """
    if target_seconds <= 0:
        raise ValueError("target_seconds must be positive")
    probe = dataclasses.replace(params, n_queries=probe_queries)
    mcts_dpw_plan(x, model, probe, seed)
    best = math.inf
    for r in range(repeats):
        start = time.perf_counter()
        mcts_dpw_plan(x, model, probe, [seed, r])
        best = min(best, time.perf_counter() - start)
    return max(1, int(target_seconds * probe_queries / best))


# --- receding-horizon controllers ---------------------------------------------


class NominalController:
    """Applies the scenario's nominal control unchanged."""

    name = "nominal_only"

    def __init__(self, model, params):
        self.model = model
        self.params = params

    def update(self, x, nominal, t0, epoch):
        return nominal


class _IntervalController:
    """Holds one control over ``(t0 + t_calc, t0 + t_calc + dt_obs]``."""

    def __init__(self, model, params):
        self.model = model
        self.params = params

    def choose(self, x, epoch):
        raise NotImplementedError

    def update(self, x, nominal, t0, epoch):
        p = self.params
        u = self.choose(np.asarray(x, dtype=float), epoch)
        lo = t0 + p.t_calc
        return with_window(nominal, lo, lo + p.dt_obs, u)


class GreedyController(_IntervalController):
    name = "greedy"

    def choose(self, x, epoch):
        return greedy_control(x, self.model, dt_obs=self.params.dt_obs, dt_ctrl=self.params.dt_ctrl)


class MCTSController(_IntervalController):
    name = "mcts_dpw"

    def __init__(self, model, params, dpw: DPWParams):
        super().__init__(model, params)
        self.dpw = dpw

    def choose(self, x, epoch):
        seed = np.random.SeedSequence([int(self.params.base_seed), int(epoch), 104729])
        return mcts_dpw_plan(x, self.model, self.dpw, seed)
