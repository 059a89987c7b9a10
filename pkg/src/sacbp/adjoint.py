"""Costate and state-variation passes over a nominal hybrid trajectory.

Both passes are the exact discrete counterparts of the forward Euler scheme
used by :func:`sacbp.hybrid.simulate_nominal`, so the quantity
``psi_hat(t) + rho(t) . psi(t)`` is conserved to rounding error on the grid.

A perturbation ending at grid point ``j`` (``tau = t_j``) acts on the Euler
step ``j-1 -> j``.  Its first-order effect enters at ``t_j`` before any jump
scheduled there, so it pairs with the left limit of the costate at ``t_j``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .hybrid import HybridTrajectory, ScenarioModel


def jacobian(fn, x) -> np.ndarray:
    """Central-difference Jacobian of ``fn`` at ``x``.

    Step per coordinate is ``max(1e-6, 1e-6*|x_i|)``.  A scalar-valued ``fn``
    yields a gradient vector.
    """
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        h = max(1e-6, 1e-6 * abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        fp = np.asarray(fn(xp), dtype=float)
        fm = np.asarray(fn(xm), dtype=float)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise FloatingPointError(f"non-finite function value near coordinate {i}")
        cols.append((fp - fm) / (2.0 * h))
    return np.stack(cols, axis=-1)


@dataclass
class AdjointTrajectory:
    """Costate on the grid.

    ``rho[j]`` is the right value at grid point ``j``; ``left_limits[k]`` is
    the value just before the jump of observation ``k``.
    """

    grid_times: np.ndarray
    rho: np.ndarray
    left_limits: np.ndarray
    jump_indices: np.ndarray
    steps_per_obs: int

    def before(self, j: int) -> np.ndarray:
        """Costate seen by a perturbation ending at grid point ``j``."""
        per = self.steps_per_obs
        if j > 0 and j % per == 0 and j // per <= len(self.left_limits):
            return self.left_limits[j // per - 1]
        return self.rho[j]


@dataclass
class VariationTrajectory:
    """State variation ``psi`` and running-cost variation ``psi_hat`` from ``tau`` on.

    Row ``i`` corresponds to grid point ``start_index + i`` (right values).
    """

    start_index: int
    grid_times: np.ndarray
    psi: np.ndarray
    psi_hat: np.ndarray

    def dot(self, adj: AdjointTrajectory) -> np.ndarray:
        """``psi_hat + rho . psi`` at every grid point from ``tau`` to the horizon."""
        rho = adj.rho[self.start_index:]
        return self.psi_hat + np.einsum("ij,ij->i", rho, self.psi)


def _jump_lookup(traj):
    return {int(j): k for k, j in enumerate(traj.jump_indices)}


def adjoint_backward_general(traj: HybridTrajectory, model: ScenarioModel) -> AdjointTrajectory:
    """Backward costate pass for a belief with continuous flow and filter jumps."""
    K = traj.n_steps
    dt = traj.dt
    states, controls = traj.states, traj.controls
    if len(traj.pre_jump_states) != len(traj.jump_indices):
        raise ValueError("trajectory is missing pre-jump states")
    jumps = _jump_lookup(traj)
    rho = np.empty_like(states)
    left = np.empty_like(traj.pre_jump_states)
    r = np.asarray(model.terminal_cost_grad(states[K]), dtype=float)
    rho[K] = r
    for j in range(K - 1, -1, -1):
        k = jumps.get(j + 1)
        if k is not None:
            r = model.jump_vjp(traj.pre_jump_states[k], traj.observations[k], r)
            left[k] = r
        x, u = states[j], controls[j]
        r = r + dt * (model.running_cost_grad(x, u) + model.flow_vjp(x, u, r))
        if not np.all(np.isfinite(r)):
            raise FloatingPointError(f"non-finite costate at grid point {j}")
        rho[j] = r
    return AdjointTrajectory(traj.grid_times, rho, left, traj.jump_indices, traj.steps_per_obs)


def adjoint_backward_mixed(traj: HybridTrajectory, model) -> AdjointTrajectory:
    """Backward costate pass for mixed observability, split into ``(rho_p, rho_b)``.

    Between epochs ``rho_p`` follows the physical flow and ``rho_b`` only
    integrates the belief part of the running-cost gradient.  At an epoch
    ``rho_p`` picks up ``(dg/dp)' rho_b`` and ``rho_b`` is mapped by
    ``(dg/db)'``, both evaluated at the stored pre-jump state.
    """
    K = traj.n_steps
    dt = traj.dt
    n_p = model.n_p
    states, controls = traj.states, traj.controls
    if len(traj.pre_jump_states) != len(traj.jump_indices):
        raise ValueError("trajectory is missing pre-jump states")
    jumps = _jump_lookup(traj)
    rho = np.empty_like(states)
    left = np.empty_like(traj.pre_jump_states)
    r = np.asarray(model.terminal_cost_grad(states[K]), dtype=float)
    rho[K] = r
    rp, rb = r[:n_p].copy(), r[n_p:].copy()
    for j in range(K - 1, -1, -1):
        k = jumps.get(j + 1)
        if k is not None:
            pre = traj.pre_jump_states[k]
            Jp, Jb = model.belief_jump_jac(pre[:n_p], pre[n_p:], traj.observations[k])
            rp = rp + Jp.T @ rb
            rb = Jb.T @ rb
            left[k, :n_p] = rp
            left[k, n_p:] = rb
        x, u = states[j], controls[j]
        grad_c = model.running_cost_grad(x, u)
        rp = rp + dt * (grad_c[:n_p] + model.phys_flow_jac(x[:n_p], u).T @ rp)
        rb = rb + dt * grad_c[n_p:]
        if not (np.all(np.isfinite(rp)) and np.all(np.isfinite(rb))):
            raise FloatingPointError(f"non-finite costate at grid point {j}")
        rho[j, :n_p] = rp
        rho[j, n_p:] = rb
    return AdjointTrajectory(traj.grid_times, rho, left, traj.jump_indices, traj.steps_per_obs)


def adjoint_backward(traj, model) -> AdjointTrajectory:
    if model.kind == "mixed":
        return adjoint_backward_mixed(traj, model)
    return adjoint_backward_general(traj, model)


def tau_index(traj, tau: float) -> int:
    s = (tau - traj.t0) / traj.dt
    j = int(round(s))
    if abs(s - j) > 1e-6 or j < 1 or j > traj.n_steps:
        raise ValueError(f"tau={tau!r} is not an interior grid point of the trajectory")
    return j


def variational_forward(traj: HybridTrajectory, model: ScenarioModel, tau: float, v) -> VariationTrajectory:
    """Forward-integrate the linearised dynamics of a needle perturbation at ``tau``.

    Initial conditions are the flow and running-cost differences between
    ``v`` and the nominal control at the start of the perturbed cell.
    """
    j0 = tau_index(traj, tau)
    dt = traj.dt
    v = np.asarray(v, dtype=float)
    x, u = traj.states[j0 - 1], traj.controls[j0 - 1]
    psi = model.flow(x, v) - model.flow(x, u)
    psi_hat = model.running_cost(x, v) - model.running_cost(x, u)
    jumps = _jump_lookup(traj)
    K = traj.n_steps
    out = np.empty((K + 1 - j0, psi.size))
    out_hat = np.empty(K + 1 - j0)
    k = jumps.get(j0)
    if k is not None:
        psi = model.jump_jvp(traj.pre_jump_states[k], traj.observations[k], psi)
    out[0] = psi
    out_hat[0] = psi_hat
    for j in range(j0, K):
        x, u = traj.states[j], traj.controls[j]
        psi_hat = psi_hat + dt * float(model.running_cost_grad(x, u) @ psi)
        psi = psi + dt * model.flow_jvp(x, u, psi)
        k = jumps.get(j + 1)
        if k is not None:
            psi = model.jump_jvp(traj.pre_jump_states[k], traj.observations[k], psi)
        out[j + 1 - j0] = psi
        out_hat[j + 1 - j0] = psi_hat
    return VariationTrajectory(j0, traj.grid_times[j0:], out, out_hat)


def cost_variation_forward(var: VariationTrajectory, traj, model) -> float:
    """First-order cost change from the forward variation (running + terminal parts)."""
    return float(var.psi_hat[-1] + model.terminal_cost_grad(traj.states[-1]) @ var.psi[-1])


def cost_variation_adjoint(adj: AdjointTrajectory, traj, model, tau: float, v) -> float:
    """First-order cost change from the costate at ``tau``."""
    j = tau_index(traj, tau)
    x, u = traj.states[j - 1], traj.controls[j - 1]
    v = np.asarray(v, dtype=float)
    r = adj.before(j)
    dflow = model.flow(x, v) - model.flow(x, u)
    return float(model.running_cost(x, v) - model.running_cost(x, u) + r @ dflow)
