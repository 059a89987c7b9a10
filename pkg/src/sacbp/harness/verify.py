"""Named verification suites with a machine-readable pass/fail table.

Each suite returns rows ``(suite, case, value, tolerance, passed)`` where
``value`` is the checked error measure and a row passes when it is at most
``tolerance`` (or satisfies the stated check for boolean rows).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from ..adjoint import adjoint_backward, variational_forward
from ..filters import (
    GaussianBelief,
    SystemModel,
    categorical_update,
    ekf_predict_continuous,
    ekf_update,
    kf1d_update,
    unscented_predict,
    unscented_update,
)
from ..hybrid import ControlSchedule, simulate_nominal
from ..planner import expected_cost_variation_formula, mode_insertion_gradient_fd, solve_box_qp


@dataclass
class Check:
    suite: str
    case: str
    value: float
    tolerance: float
    passed: bool

    def fields(self) -> list:
        return [self.suite, self.case, f"{self.value:.6g}", f"{self.tolerance:.6g}", "PASS" if self.passed else "FAIL"]


def _check(suite, case, value, tol):
    value = float(value)
    return Check(suite, case, value, float(tol), bool(np.isfinite(value) and value <= tol))


# --- adjoint invariance ------------------------------------------------------


def duality_drift(model, x0, nominal, tau, v, *, horizon, dt_ctrl, dt_obs, seed=0) -> float:
    """``max_t |d(t) - d(tau)| / (1 + |d(tau)|)`` for ``d = psi_hat + rho . psi``."""
    traj = simulate_nominal(model, x0, nominal, horizon, seed, dt_ctrl=dt_ctrl, dt_obs=dt_obs)
    adj = adjoint_backward(traj, model)
    d = variational_forward(traj, model, tau, v).dot(adj)
    return float(np.max(np.abs(d - d[0])) / (1.0 + abs(d[0])))


def suite_adjoint_invariance(tol: float = 1e-6) -> list:
    from ..scenarios import Mixed1DModel, linear_initial_belief, make_linear_fixture, make_tracking_scenario

    out = []
    for seed in range(3):
        model = make_linear_fixture(2 + seed % 2, seed)
        x0 = linear_initial_belief(model, seed)
        rng = np.random.default_rng([seed, 5])
        nom = ControlSchedule(0.0, 1e-3, rng.uniform(-1, 1, (2000, model.m)), model.box_lo, model.box_hi)
        for tau in (0.3, 1.0, 1.75):
            v = rng.uniform(-2, 2, model.m)
            drift = duality_drift(model, x0, nom, tau, v, horizon=2.0, dt_ctrl=1e-3, dt_obs=0.5, seed=seed)
            out.append(_check("adjoint-invariance", f"linear[seed={seed},tau={tau}]", drift, tol))
    mixed = Mixed1DModel()
    nom = ControlSchedule.constant(0.0, 1e-3, 2000, np.array([0.2]), mixed.box_lo, mixed.box_hi)
    for tau in (0.3, 0.5, 1.2):
        drift = duality_drift(mixed, np.array([1.0, 0.5, 1.0]), nom, tau, np.array([1.5]),
                              horizon=2.0, dt_ctrl=1e-3, dt_obs=0.5, seed=1)
        out.append(_check("adjoint-invariance", f"mixed1d[tau={tau}]", drift, tol))
    sc = make_tracking_scenario()
    tm = sc.model
    nom = ControlSchedule.constant(0.0, 0.01, 100, np.array([0.5, -0.3]), tm.box_lo, tm.box_hi)
    drift = duality_drift(tm, sc.initial_state, nom, 0.35, np.array([2.0, 1.0]),
                          horizon=1.0, dt_ctrl=0.01, dt_obs=0.2, seed=2)
    out.append(_check("adjoint-invariance", "tracking[tau=0.35]", drift, tol))
    return out


# --- mode insertion gradient --------------------------------------------------


def deterministic_fd_check(seed: int = 3, tau: float = 0.75, eps=(1e-3, 5e-4), dt_ctrl: float = 1e-4):
    """FD of the total cost against the adjoint value on the noise-free linear fixture.

    Returns ``(relative error at eps[0], error ratio eps[0] / eps[1], check)``.
    """
    from ..scenarios import linear_initial_belief, make_linear_fixture

    model = make_linear_fixture(2, seed, deterministic=True)
    x0 = linear_initial_belief(model, seed)
    n = int(round(2.0 / dt_ctrl))
    nom = ControlSchedule.constant(0.0, dt_ctrl, n, np.full(model.m, 0.3), model.box_lo, model.box_hi)
    v = np.linspace(1.0, -0.5, model.m)
    res = mode_insertion_gradient_fd(model, nom, x0, tau, v, list(eps), 1, 0, horizon=2.0, dt_ctrl=dt_ctrl, dt_obs=0.5)
    err = np.abs(res.fd_mean - res.nu_mean)
    return float(err[0] / abs(res.nu_mean)), float(err[0] / err[1]), res


# (tau, v) pairs for the stochastic check; the nominal drives at (0.5, -0.3).
TRACKING_FD_CASES = (
    (0.5, (2.0, 2.0)),
    (0.5, (1.0, 0.2)),
    (0.3, (-1.0, 0.5)),
)


def stochastic_fd_checks(n_mc: int = 256, eps: float = 1e-3, dt_ctrl: float = 1e-3, horizon: float = 0.6, seed: int = 0,
                         cases=TRACKING_FD_CASES):
    """Expected-cost FD against the mean adjoint value on the tracking model.

    Observations are replayed from each nominal sample (common random numbers).
    Returns a list of ``(tau, v, |FD - E[nu]| / pooled SE, result)``.
    """
    from ..scenarios import make_tracking_scenario

    sc = make_tracking_scenario()
    m = sc.model
    n = int(round(horizon / dt_ctrl))
    nom = ControlSchedule.constant(0.0, dt_ctrl, n, np.array([0.5, -0.3]), m.box_lo, m.box_hi)
    out = []
    for tau, v in cases:
        res = mode_insertion_gradient_fd(m, nom, sc.initial_state, tau, np.array(v), [eps], n_mc, seed,
                                         horizon=horizon, dt_ctrl=dt_ctrl, dt_obs=m.dt_obs)
        z = float(abs(res.fd_mean[0] - res.nu_mean) / res.pooled_se()[0])
        out.append((tau, v, z, res))
    return out


def suite_mode_insertion_fd() -> list:
    rel, ratio, _ = deterministic_fd_check()
    out = [
        _check("mode-insertion-fd", "deterministic relative error eps=1e-3", rel, 0.01),
        Check("mode-insertion-fd", "deterministic error ratio eps/(eps/2)", ratio, 2.5, bool(1.5 <= ratio <= 2.5)),
    ]
    for tau, v, z, _ in stochastic_fd_checks():
        out.append(_check("mode-insertion-fd", f"tracking[tau={tau},v={v}] |FD-nu|/pooled SE", z, 2.0))
    return out


# --- jump bounds ---------------------------------------------------------------


def kf1d_bound_violations(n: int, seed: int = 0) -> int:
    """Cases with ``||g(b, y)|| > sqrt(2) ||b|| + ||b|| |y|`` for the scalar KF."""
    rng = np.random.default_rng([seed, 11])
    mus = rng.standard_normal(n) * np.exp(rng.uniform(-5, 5, n))
    ss = np.exp(rng.uniform(-8, 8, n))
    ys = rng.standard_normal(n) * np.exp(rng.uniform(-5, 5, n))
    bad = 0
    for mu, s, y in zip(mus, ss, ys):
        b = np.array([mu, s])
        nb = np.linalg.norm(b)
        if np.linalg.norm(kf1d_update(b, y)) > math.sqrt(2) * nb + nb * abs(y):
            bad += 1
    return bad


def categorical_bound_violations(n: int, seed: int = 0) -> int:
    """Cases with ``||g(b, y)|| > ||b||`` for the unnormalised categorical update."""
    rng = np.random.default_rng([seed, 13])
    bad = 0
    for _ in range(n):
        k = int(rng.integers(2, 8))
        n_obs = int(rng.integers(2, 6))
        b = rng.uniform(0, 1, k) * np.exp(rng.uniform(-5, 5))
        b[rng.integers(k)] += 1e-3
        lik = rng.dirichlet(np.ones(n_obs), size=k).T  # lik[y, i] sums to one over y
        y = int(rng.integers(n_obs))
        if not np.any(lik[y] * b > 0):
            continue
        if np.linalg.norm(categorical_update(b, lik, y)) > np.linalg.norm(b):
            bad += 1
    return bad


def suite_filter_bounds(n: int = 100_000) -> list:
    return [
        _check("filter-bounds", f"scalar KF violations of {n}", kf1d_bound_violations(n), 0),
        _check("filter-bounds", f"categorical violations of {n}", categorical_bound_violations(n), 0),
    ]


# --- QP brute force ---------------------------------------------------------------


def qp_instance(rng, m: int = 2):
    """Random ``(C diag, mean rho, H, u_nom, lo, hi)`` with the nominal inside the box."""
    C = rng.uniform(0.1, 2.0, m)
    n_x = int(rng.integers(m, 6))
    rho = rng.standard_normal(n_x)
    H = rng.standard_normal((n_x, m))
    lo = -rng.uniform(0.2, 1.5, m)
    hi = rng.uniform(0.2, 1.5, m)
    u = rng.uniform(lo, hi)
    return C, rho, H, u, lo, hi


def qp_grid_gap(C, rho, H, u, lo, hi, step: float = 1e-2):
    """Analytic clamp value minus the best value on a dense grid (plus ``nu*`` and ``nu(u)``)."""
    g = H.T @ rho
    const = g @ u + 0.5 * u @ (C * u)
    v_star, quad = solve_box_qp(C, g, lo, hi)
    nu_star = quad - const
    axes = [np.linspace(a, b, int(round((b - a) / step)) + 1) for a, b in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(C))
    vals = 0.5 * np.einsum("ij,j,ij->i", grid, C, grid) + grid @ (H.T @ rho) - 0.5 * u @ (C * u) - g @ u
    return float(nu_star - vals.min()), float(nu_star), expected_cost_variation_formula(u, rho, H, u, C)


def suite_qp_bruteforce(n: int = 100, seed: int = 0) -> list:
    rng = np.random.default_rng([seed, 17])
    gaps, nus, at_nominal = [], [], []
    for i in range(n):
        gap, nu_star, nu_u = qp_grid_gap(*qp_instance(rng, m=1 + i % 2))
        gaps.append(abs(gap))
        nus.append(nu_star)
        at_nominal.append(abs(nu_u))
    return [
        _check("qp-bruteforce", f"max |analytic - grid| over {n}", max(gaps), 1e-3),
        _check("qp-bruteforce", f"max nu* over {n}", max(nus), 0.0),
        _check("qp-bruteforce", f"max |nu(u_nominal)| over {n}", max(at_nominal), 0.0),
    ]


# --- filter equivalence ----------------------------------------------------------


def _exact_kf(mean, cov, y, C, R):
    S = C @ cov @ C.T + R
    K = cov @ C.T @ np.linalg.inv(S)
    return mean + K @ (y - C @ mean), cov - K @ C @ cov


def kf_equivalence_errors(n_steps: int = 20, seed: int = 0):
    """Max deviation of EKF and UKF from the closed-form linear KF over ``n_steps``."""
    rng = np.random.default_rng([seed, 19])
    n, q = 3, 2
    F = np.eye(n) + 0.1 * rng.standard_normal((n, n))
    C = rng.standard_normal((q, n))
    G = rng.standard_normal((n, n)) * 0.3
    Q = G @ G.T + 0.05 * np.eye(n)
    R = 0.2 * np.eye(q)
    system = SystemModel(f=lambda x, u: F @ x, jac=lambda x, u: F, Q=Q, h=lambda x: C @ x, h_jac=lambda x: C, R=R)
    mean, cov = rng.standard_normal(n), np.eye(n)
    ekf = GaussianBelief(mean.copy(), cov.copy())
    ukf = GaussianBelief(mean.copy(), cov.copy())
    err_ekf = err_ukf = 0.0
    for _ in range(n_steps):
        y = rng.standard_normal(q)
        mean, cov = F @ mean, F @ cov @ F.T + Q
        mean, cov = _exact_kf(mean, cov, y, C, R)
        ekf = GaussianBelief(F @ ekf.mean, F @ ekf.cov @ F.T + Q)
        ekf = ekf_update(ekf, y, system)
        ukf = unscented_predict(ukf, lambda x: F @ x, Q)
        m2, c2 = unscented_update(ukf.mean[None], ukf.cov[None], R[None], y[None],
                                  lambda x, v: np.einsum("qn,bsn->bsq", C, x) + v)
        ukf = GaussianBelief(m2[0], c2[0])
        for b, name in ((ekf, "ekf"), (ukf, "ukf")):
            e = max(np.max(np.abs(b.mean - mean)), np.max(np.abs(b.cov - cov)))
            if name == "ekf":
                err_ekf = max(err_ekf, e)
            else:
                err_ukf = max(err_ukf, e)
    return err_ekf, err_ukf


def scalar_prediction_error(a: float = -0.7, q: float = 0.3, s0: float = 1.3, dt: float = 1e-3) -> float:
    """Euler EKF prediction to ``t = 1`` against ``e^{2a} s0 + q (e^{2a} - 1) / (2a)``."""
    system = SystemModel(f=lambda x, u: a * x, jac=lambda x, u: np.array([[a]]), Q=np.array([[q]]))
    b = GaussianBelief(np.array([0.4]), np.array([[s0]]))
    for _ in range(int(round(1.0 / dt))):
        b = ekf_predict_continuous(b, None, system, dt)
    exact = math.exp(2 * a) * s0 + q * (math.exp(2 * a) - 1) / (2 * a)
    return abs(float(b.cov[0, 0]) - exact)


def suite_kf_equivalence() -> list:
    e_ekf, e_ukf = kf_equivalence_errors()
    return [
        _check("kf-equivalence", "EKF vs KF, 20 steps", e_ekf, 1e-8),
        _check("kf-equivalence", "UKF vs KF, 20 steps", e_ukf, 1e-8),
        _check("kf-equivalence", "continuous EKF prediction vs closed form", scalar_prediction_error(), 1e-3),
    ]


SUITES = {
    "adjoint-invariance": suite_adjoint_invariance,
    "mode-insertion-fd": suite_mode_insertion_fd,
    "filter-bounds": suite_filter_bounds,
    "qp-bruteforce": suite_qp_bruteforce,
    "kf-equivalence": suite_kf_equivalence,
}


def verify(suite: str) -> list:
    if suite not in SUITES:
        raise KeyError(f"unknown suite {suite!r}; choose from {sorted(SUITES)}")
    return SUITES[suite]()


def format_table(checks) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["suite", "case", "value", "tolerance", "status"])
    for c in checks:
        writer.writerow(c.fields())
    return buf.getvalue()
