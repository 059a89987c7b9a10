"""SACBP control update and the receding-horizon loop.

Runtime of one update is ``O(N * K * (forward + backward step))`` with ``K``
grid points over the horizon; the forward/backward passes per sample are
independent and may run on a thread pool, reduced in sample order.

For every admissible perturbation time the expected first-order cost change
is the convex separable quadratic

    nu(v) = 0.5 v' C_u v + g' v - kappa,

with ``g = E[H(x)' rho]`` and ``kappa = E[g_i' u_i + 0.5 u_i' C_u u_i]``
estimated from the Monte Carlo rollouts.  When the state and nominal
control at ``tau`` are deterministic this is exactly
``0.5 v'Cv + E[rho]' H (v - u) - 0.5 u'Cu``.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adjoint import adjoint_backward, tau_index
from .filters import FilterError
from .hybrid import (
    ControlSchedule,
    RolloutDiverged,
    committed_prefix,
    grid_steps,
    perturb_control,
    simulate_nominal,
    total_cost,
    with_window,
)

log = logging.getLogger(__name__)

ROLLOUT_ERRORS = (RolloutDiverged, FilterError, FloatingPointError, np.linalg.LinAlgError)


class PlannerError(RuntimeError):
    pass


@dataclass(frozen=True)
class PlannerParams:
    horizon: float = 2.0
    dt_obs: float = 0.2
    dt_ctrl: float = 0.01
    eps: float = 0.16
    n_samples: int = 10
    t_calc: float = 0.15
    base_seed: int = 0
    workers: int = 1
    use_batched: bool = True

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        if not 0 <= self.eps < self.dt_obs:
            raise ValueError("eps must satisfy 0 <= eps < dt_obs")
        if not 0 <= self.t_calc < self.dt_obs:
            raise ValueError("t_calc must satisfy 0 <= t_calc < dt_obs")
        grid_steps(self.dt_obs, self.dt_ctrl, "dt_obs")
        grid_steps(self.eps, self.dt_ctrl, "eps")
        grid_steps(self.t_calc, self.dt_ctrl, "t_calc")
        if grid_steps(self.horizon, self.dt_ctrl, "horizon") % self.steps_per_obs:
            raise ValueError("horizon must be a multiple of dt_obs")
        if self.horizon < self.t_calc + self.dt_obs:
            raise ValueError("horizon must cover t_calc + dt_obs")

    @property
    def steps_per_obs(self) -> int:
        return grid_steps(self.dt_obs, self.dt_ctrl)

    @property
    def n_steps(self) -> int:
        return grid_steps(self.horizon, self.dt_ctrl)

    def tau_indices(self) -> np.ndarray:
        """Grid indices (relative to the epoch start) of ``tau`` in ``(t_calc+eps, t_calc+dt_obs]``."""
        lo = grid_steps(self.t_calc + self.eps, self.dt_ctrl)
        hi = grid_steps(self.t_calc + self.dt_obs, self.dt_ctrl)
        if hi <= lo:
            raise PlannerError("empty perturbation-time grid")
        return np.arange(lo + 1, hi + 1)


@dataclass
class PerturbationResult:
    tau_star: float
    v_star: np.ndarray
    nu_star: float
    per_tau_curve: list
    applied: bool = True


def solve_box_qp(C_diag, g, lo, hi):
    """Minimise ``0.5 v' diag(C) v + g' v`` over ``lo <= v <= hi`` (separable clamp)."""
    C_diag = np.asarray(C_diag, dtype=float)
    v = np.clip(-np.asarray(g, dtype=float) / C_diag, lo, hi)
    return v, float(0.5 * v @ (C_diag * v) + g @ v)


def nu_quadratic(v, lin, const, C_diag) -> float:
    v = np.asarray(v, dtype=float)
    return float(0.5 * v @ (C_diag * v) + lin @ v - const)


def expected_cost_variation_formula(v, mean_rho, H, u_nom, C_diag) -> float:
    """``0.5 v'Cv + rho' H (v - u) - 0.5 u'Cu``."""
    v = np.asarray(v, dtype=float)
    u_nom = np.asarray(u_nom, dtype=float)
    C_diag = np.asarray(C_diag, dtype=float)
    return float(0.5 * v @ (C_diag * v) + mean_rho @ (H @ (v - u_nom)) - 0.5 * u_nom @ (C_diag * u_nom))


def expected_cost_variation(v, tau, mean_rho, model, nominal, x0, *, dt_ctrl, dt_obs, t0=0.0) -> float:
    """Expected first-order cost change of inserting ``v`` at ``tau``.

    The nominal state and control at ``tau`` come from the deterministic flow
    from ``x0``, which requires ``tau`` to precede the first observation.
    """
    j = grid_steps(tau - t0, dt_ctrl, "tau - t0")
    if j < 1:
        raise ValueError("tau must lie after t0")
    if j >= grid_steps(dt_obs, dt_ctrl):
        raise ValueError("tau at or after the first observation epoch: nominal state is stochastic")
    x = np.array(x0, dtype=float)
    for i in range(j - 1):
        x = x + dt_ctrl * model.flow(x, nominal.control(t0 + (i + 0.5) * dt_ctrl, x))
    u = nominal.control(t0 + (j - 0.5) * dt_ctrl, x)
    return expected_cost_variation_formula(v, mean_rho, model.control_matrix(x), u, model.control_cost)


def optimize_perturbation(taus, lin, const, C_diag, lo, hi, u_nom=None) -> PerturbationResult:
    """Per-``tau`` clamp solution, then the global minimiser over ``tau`` (earliest on ties).

    If no ``tau`` gives a strictly negative value the result is marked as not
    applied and the nominal control is kept.
    """
    taus = np.asarray(taus, dtype=float)
    if taus.size == 0:
        raise PlannerError("empty perturbation-time grid")
    curve = []
    values = np.empty(taus.size)
    for i, tau in enumerate(taus):
        v, quad = solve_box_qp(C_diag, lin[i], lo, hi)
        values[i] = quad - const[i]
        curve.append((float(tau), float(values[i]), v))
    best = int(np.argmin(values))
    nu_star = float(values[best])
    if not nu_star < 0.0:
        keep = np.asarray(u_nom[best]) if u_nom is not None else curve[best][2]
        return PerturbationResult(float(taus[best]), keep, 0.0, curve, applied=False)
    return PerturbationResult(float(taus[best]), curve[best][2], nu_star, curve, applied=True)


def sample_seed(base_seed: int, epoch: int, sample: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(base_seed), int(epoch), int(sample)])


def _sample_coefficients(model, x0, nominal, params, t0, epoch, i, tau_idx):
    rng = np.random.default_rng(sample_seed(params.base_seed, epoch, i))
    try:
        traj = simulate_nominal(
            model, x0, nominal, params.horizon, dt_ctrl=params.dt_ctrl, dt_obs=params.dt_obs, t0=t0, rng=rng
        )
        adj = adjoint_backward(traj, model)
    except ROLLOUT_ERRORS as exc:
        log.info("epoch %d sample %d discarded: %s", epoch, i, exc)
        return None
    C = model.control_cost
    lin = np.empty((tau_idx.size, model.m))
    const = np.empty(tau_idx.size)
    rho = np.empty((tau_idx.size, x0.size))
    u_nom = np.empty((tau_idx.size, model.m))
    for a, j in enumerate(tau_idx):
        r = adj.before(j)
        x, u = traj.states[j - 1], traj.controls[j - 1]
        g = model.control_matrix(x).T @ r
        lin[a] = g
        const[a] = g @ u + 0.5 * u @ (C * u)
        rho[a] = r
        u_nom[a] = u
    return lin, const, rho, u_nom


@dataclass
class SACBPUpdate:
    control: object
    perturbation: PerturbationResult
    n_effective: int
    n_failed: int
    mean_rho: np.ndarray = field(repr=False)


def sacbp_control_update(x0, nominal, model, params: PlannerParams, *, t0: float = 0.0, epoch: int = 0) -> SACBPUpdate:
    """One SACBP update: Monte Carlo costates, per-``tau`` clamp, perturbed nominal.

    Models exposing ``batched_coefficients`` run all samples in one call
    (unless ``params.use_batched`` is off); otherwise samples are mapped over
    ``params.workers`` threads.
    """
    x0 = np.asarray(x0, dtype=float)
    tau_idx = params.tau_indices()
    n = params.n_samples

    def work(i):
        return _sample_coefficients(model, x0, nominal, params, t0, epoch, i, tau_idx)

    results = None
    fast = getattr(model, "batched_coefficients", None)
    if fast is not None and params.use_batched:
        seeds = [sample_seed(params.base_seed, epoch, i) for i in range(n)]
        results = fast(x0, nominal, params, t0, seeds, tau_idx)
    if results is None and params.workers > 1:
        with ThreadPoolExecutor(max_workers=params.workers) as pool:
            results = list(pool.map(work, range(n)))
    elif results is None:
        results = [work(i) for i in range(n)]
    ok = [r for r in results if r is not None]
    n_failed = n - len(ok)
    if not ok or n_failed > n / 2:
        raise PlannerError(f"{n_failed} of {n} rollouts failed")
    lin = np.mean(np.stack([r[0] for r in ok]), axis=0)
    const = np.mean(np.stack([r[1] for r in ok]), axis=0)
    mean_rho = np.mean(np.stack([r[2] for r in ok]), axis=0)
    u_nom = np.mean(np.stack([r[3] for r in ok]), axis=0)
    taus = t0 + params.dt_ctrl * tau_idx
    result = optimize_perturbation(taus, lin, const, model.control_cost, model.box_lo, model.box_hi, u_nom)
    control = nominal
    if result.applied and params.eps > 0:
        control = with_window(nominal, result.tau_star - params.eps, result.tau_star, result.v_star)
    return SACBPUpdate(control, result, len(ok), n_failed, mean_rho)


class SACBPController:
    name = "sacbp"

    def __init__(self, model, params: PlannerParams):
        self.model = model
        self.params = params
        self.last = None

    def update(self, x, nominal, t0, epoch):
        self.last = sacbp_control_update(x, nominal, self.model, self.params, t0=t0, epoch=epoch)
        return self.last.control


# --- finite-difference check of the mode insertion gradient ---------------


@dataclass
class ModeInsertionCheck:
    eps: np.ndarray
    fd_mean: np.ndarray
    fd_se: np.ndarray
    nu_mean: float
    nu_se: float
    fd_samples: np.ndarray = field(repr=False)
    nu_samples: np.ndarray = field(repr=False)

    def pooled_se(self) -> np.ndarray:
        return np.sqrt(self.fd_se**2 + self.nu_se**2)


def _se(samples, axis=0):
    n = samples.shape[axis]
    if n < 2:
        return np.zeros(np.delete(samples.shape, axis)) if samples.ndim > 1 else 0.0
    return np.std(samples, axis=axis, ddof=1) / np.sqrt(n)


def mode_insertion_gradient_fd(
    model, nominal, x0, tau, v, eps_list, n_mc, seed, *, horizon, dt_ctrl, dt_obs, t0=0.0
) -> ModeInsertionCheck:
    """Finite-difference estimate of the derivative of expected cost in ``eps``.

    Each sample draws one observation sequence from the nominal rollout and
    replays it in every perturbed rollout, so nominal and perturbed costs
    share their random numbers.  The nominal control actually applied along
    the sample is held fixed outside the perturbation window.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    eps_list = np.asarray(eps_list, dtype=float)
    if np.any(eps_list >= tau - t0):
        raise ValueError("every eps must be smaller than tau - t0")
    x0 = np.asarray(x0, dtype=float)
    fd = np.empty((n_mc, eps_list.size))
    nus = np.empty(n_mc)
    for i in range(n_mc):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), i]))
        traj = simulate_nominal(model, x0, nominal, horizon, dt_ctrl=dt_ctrl, dt_obs=dt_obs, t0=t0, rng=rng)
        j0 = total_cost(traj, model)
        adj = adjoint_backward(traj, model)
        j = tau_index(traj, tau)
        x, u = traj.states[j - 1], traj.controls[j - 1]
        vv = np.asarray(v, dtype=float)
        nus[i] = model.running_cost(x, vv) - model.running_cost(x, u) + adj.before(j) @ (model.flow(x, vv) - model.flow(x, u))
        replay = ControlSchedule(t0, dt_ctrl, traj.controls, model.box_lo, model.box_hi)
        for a, eps in enumerate(eps_list):
            pert = perturb_control(replay, tau, vv, eps)
            traj_e = simulate_nominal(
                model, x0, pert, horizon, dt_ctrl=dt_ctrl, dt_obs=dt_obs, t0=t0, observations=traj.observations
            )
            fd[i, a] = (total_cost(traj_e, model) - j0) / eps
    return ModeInsertionCheck(
        eps=eps_list,
        fd_mean=fd.mean(axis=0),
        fd_se=np.atleast_1d(_se(fd)),
        nu_mean=float(nus.mean()),
        nu_se=float(_se(nus)),
        fd_samples=fd,
        nu_samples=nus,
    )


# --- receding horizon -----------------------------------------------------


@dataclass
class MetricsLog:
    """Per-epoch metric rows ``(t, name, value)`` and a run summary."""

    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def add(self, t: float, metrics: dict):
        for name in sorted(metrics):
            self.rows.append((float(t), name, float(metrics[name])))

    def series(self, name: str) -> np.ndarray:
        return np.array([[t, v] for t, n, v in self.rows if n == name]).reshape(-1, 2)

    def to_csv(self) -> str:
        lines = ["t,metric,value"]
        for t, name, value in self.rows:
            lines.append(f"{t:.17g},{name},{value:.17g}")
        return "\n".join(lines) + "\n"


def receding_horizon_run(scenario, controller, sim_duration: float, world_seed: int) -> MetricsLog:
    """Closed-loop simulation: re-plan every ``dt_obs`` and apply the plan in between.

    A plan computed at ``t0`` keeps the previous plan on ``(t0, t0 + t_calc]``
    (the computation latency), so executing it from ``t0`` is equivalent to
    switching at ``t0 + t_calc``.  Wall-clock time is logged in the summary
    only, keeping metric rows reproducible.
    """
    params = controller.params
    model = scenario.model
    dt = params.dt_ctrl
    per = params.steps_per_obs
    n_epochs = grid_steps(sim_duration, params.dt_obs, "sim_duration")
    rng_world = np.random.default_rng(np.random.SeedSequence([int(world_seed), 7919]))
    world = scenario.make_world(rng_world)
    x = np.array(scenario.initial_state, dtype=float)
    n_cells = params.n_steps
    plan = scenario.base_nominal(0.0, n_cells, dt)
    metrics_log = MetricsLog()
    initial = world.metrics(x)
    walls = []
    failure = None
    t0 = 0.0
    for k in range(n_epochs):
        t0 = k * params.dt_obs
        nominal = committed_prefix(plan, scenario.base_nominal(t0, n_cells, dt), t0, params.t_calc, params.horizon, dt)
        start = time.perf_counter()
        try:
            plan = controller.update(x, nominal, t0, k)
        except PlannerError as exc:
            log.warning("epoch %d: planner failed (%s); keeping nominal", k, exc)
            plan = nominal
        walls.append(time.perf_counter() - start)
        try:
            for j in range(per):
                u = plan.control(t0 + (j + 0.5) * dt, x)
                world.step(u, dt)
                x = x + dt * model.flow(x, u)
            y = world.observe(x)
            x = scenario.filter_jump(x, y)
        except (FilterError, RolloutDiverged, FloatingPointError, np.linalg.LinAlgError) as exc:
            failure = f"filter divergence at epoch {k}: {exc}"
            log.warning(failure)
            break
        metrics_log.add(t0 + params.dt_obs, world.metrics(x))
    final = {}
    for _, name, value in metrics_log.rows[-len(initial):] if metrics_log.rows else []:
        final[name] = value
    metrics_log.summary = {
        "initial": {k: float(v) for k, v in initial.items()},
        "final": final,
        "mean_wall_clock": float(np.mean(walls)) if walls else 0.0,
        "max_wall_clock": float(np.max(walls)) if walls else 0.0,
        "n_updates": len(walls),
        "failed": failure is not None,
        "failure_reason": failure,
    }
    return metrics_log
