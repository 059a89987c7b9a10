import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sacbp.baselines import NominalController
from sacbp.filters import FilterError
from sacbp.harness.verify import deterministic_fd_check
from sacbp.hybrid import ControlSchedule, StatePolicy
from sacbp.planner import (
    MetricsLog,
    PlannerError,
    PlannerParams,
    expected_cost_variation,
    expected_cost_variation_formula,
    mode_insertion_gradient_fd,
    optimize_perturbation,
    receding_horizon_run,
    sacbp_control_update,
    sample_seed,
    solve_box_qp,
)
from sacbp.scenarios import (
    Mixed1DModel,
    linear_initial_belief,
    make_linear_fixture,
    make_linear_scenario,
    make_tracking_scenario,
)

finite = st.floats(-10, 10, allow_nan=False)


def _zero_nominal(model, params, t0=0.0):
    return ControlSchedule.constant(t0, params.dt_ctrl, params.n_steps, np.zeros(model.m), model.box_lo, model.box_hi)


# --- expected cost variation -------------------------------------------------


@given(u=st.lists(finite, min_size=2, max_size=2), rho=st.lists(finite, min_size=2, max_size=2),
       c=st.lists(st.floats(0.01, 10), min_size=2, max_size=2))
def test_nominal_value_cancels_exactly(u, rho, c):
    H = np.array([[1.0, 0.5], [-0.3, 2.0]])
    assert expected_cost_variation_formula(u, np.array(rho), H, u, np.array(c)) == 0.0


def test_hand_evaluated_variation():
    assert expected_cost_variation_formula([-1, 1], np.array([2.0, -3.0]), np.eye(2), [0, 0], np.ones(2)) == -4.0


def test_zero_costate_minimised_at_zero():
    C = np.array([1.0, 3.0])
    u = np.array([0.7, -0.4])
    v, _ = solve_box_qp(C, np.zeros(2), -np.ones(2), np.ones(2))
    np.testing.assert_array_equal(v, 0.0)
    value = expected_cost_variation_formula(v, np.zeros(2), np.eye(2), u, C)
    assert value == pytest.approx(-0.5 * u @ (C * u), abs=1e-15)


def test_open_loop_variation_uses_deterministic_state():
    model = make_linear_fixture(2, 0)
    params = PlannerParams(horizon=1.0, dt_obs=0.5, dt_ctrl=0.01, eps=0.05, t_calc=0.1)
    nominal = _zero_nominal(model, params)
    x0 = linear_initial_belief(model)
    rho = np.ones(model.n_x)
    H = model.control_matrix(x0)
    v = np.array([0.5, -0.5])
    value = expected_cost_variation(v, 0.3, rho, model, nominal, x0, dt_ctrl=0.01, dt_obs=0.5)
    assert value == pytest.approx(expected_cost_variation_formula(v, rho, H, np.zeros(2), model.control_cost))
    with pytest.raises(ValueError):
        expected_cost_variation(v, 0.5, rho, model, nominal, x0, dt_ctrl=0.01, dt_obs=0.5)


# --- per-tau optimisation ---------------------------------------------------------


def test_zero_costate_and_nominal_is_noop():
    taus = np.linspace(0.1, 0.5, 5)
    res = optimize_perturbation(taus, np.zeros((5, 2)), np.zeros(5), np.ones(2), -np.ones(2), np.ones(2),
                                np.zeros((5, 2)))
    assert not res.applied
    assert res.nu_star == 0.0
    assert res.tau_star == taus[0]
    np.testing.assert_array_equal(res.v_star, 0.0)


def test_constant_costate_picks_earliest_tau():
    taus = np.linspace(0.1, 0.5, 5)
    lin = np.tile([2.0, -3.0], (5, 1))
    res = optimize_perturbation(taus, lin, np.zeros(5), np.ones(2), -np.ones(2), np.ones(2))
    assert res.applied
    assert res.tau_star == taus[0]
    np.testing.assert_array_equal(res.v_star, [-1.0, 1.0])
    assert res.nu_star == pytest.approx(-4.0)


def test_single_axis_saturation():
    v, value = solve_box_qp(np.array([1.0, 100.0]), np.array([2.0, -3.0]), -np.ones(2), np.ones(2))
    np.testing.assert_allclose(v, [-1.0, 0.03], rtol=1e-14)
    grid = np.arange(-100, 101) / 100
    V1, V2 = np.meshgrid(grid, grid, indexing="ij")
    brute = 0.5 * V1**2 + 50 * V2**2 + 2 * V1 - 3 * V2
    assert value == pytest.approx(brute.min(), abs=1e-12)


@settings(max_examples=200)
@given(seed=st.integers(0, 2**32 - 1))
def test_returned_nu_is_nonpositive(seed):
    rng = np.random.default_rng(seed)
    k, m = rng.integers(1, 6), rng.integers(1, 4)
    lin = rng.normal(0, 2, (k, m))
    u_nom = rng.uniform(-1, 1, (k, m))
    C = rng.uniform(0.1, 5, m)
    const = np.einsum("ij,ij->i", lin, u_nom) + 0.5 * np.einsum("ij,j,ij->i", u_nom, C, u_nom)
    res = optimize_perturbation(np.arange(1, k + 1) * 0.1, lin, const, C, -np.ones(m), np.ones(m), u_nom)
    assert res.nu_star <= 0.0
    if res.applied:
        assert res.nu_star < 0.0
    else:
        assert res.nu_star == 0.0
        k_best = int(np.argmin([c[1] for c in res.per_tau_curve]))
        np.testing.assert_array_equal(res.v_star, u_nom[k_best])


# --- control update ------------------------------------------------------------


def test_tau_grid_window():
    p = PlannerParams(horizon=2.0, dt_obs=0.2, dt_ctrl=0.01, eps=0.16, t_calc=0.15)
    idx = p.tau_indices()
    assert idx[0] * 0.01 > 0.15 + 0.16 - 1e-12
    assert idx[-1] * 0.01 == pytest.approx(0.35)
    assert len(idx) == 4


def test_zero_cost_returns_nominal():
    model = make_linear_fixture(2, 0, zero_cost=True)
    model.control_cost = np.ones(2)
    params = PlannerParams(horizon=1.0, dt_obs=0.5, dt_ctrl=0.01, eps=0.05, t_calc=0.1, n_samples=3)
    nominal = _zero_nominal(model, params)
    out = sacbp_control_update(linear_initial_belief(model), nominal, model, params)
    assert out.control is nominal
    assert not out.perturbation.applied


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), epoch=st.integers(0, 50))
def test_perturbation_confined_to_window(seed, epoch):
    model = make_linear_fixture(2, seed % 7)
    params = PlannerParams(horizon=1.0, dt_obs=0.5, dt_ctrl=0.01, eps=0.1, t_calc=0.1, n_samples=4, base_seed=seed)
    t0 = 0.5 * epoch
    nominal = ControlSchedule(t0, 0.01, np.random.default_rng(seed).uniform(-0.5, 0.5, (100, 2)),
                              model.box_lo, model.box_hi)
    out = sacbp_control_update(linear_initial_belief(model, seed), nominal, model, params, t0=t0, epoch=epoch)
    tau = out.perturbation.tau_star
    assert t0 + 0.2 < tau <= t0 + 0.6 + 1e-9
    diff = np.any(out.control.values != nominal.values, axis=1)
    mids = t0 + (np.arange(100) + 0.5) * 0.01
    assert np.all(~diff | ((mids > tau - 0.1) & (mids <= tau)))
    if out.perturbation.applied:
        inside = (mids > tau - 0.1) & (mids <= tau)
        np.testing.assert_array_equal(out.control.values[inside], np.tile(out.perturbation.v_star, (10, 1)))


def test_constant_policy_matches_open_loop():
    sc = make_tracking_scenario()
    m = sc.model
    params = PlannerParams(n_samples=3)
    u0 = np.array([0.4, -0.7])
    closed = StatePolicy(lambda x: u0, m.box_lo, m.box_hi)
    opened = ControlSchedule.constant(0.0, params.dt_ctrl, params.n_steps, u0, m.box_lo, m.box_hi)
    a = sacbp_control_update(sc.initial_state, closed, m, params).perturbation
    b = sacbp_control_update(sc.initial_state, opened, m, params).perturbation
    assert a.tau_star == b.tau_star
    np.testing.assert_array_equal(a.v_star, b.v_star)
    assert [c[1] for c in a.per_tau_curve] == [c[1] for c in b.per_tau_curve]


def test_same_output_across_worker_counts():
    sc = make_tracking_scenario()
    outs = []
    for workers in (1, 4, 8):
        params = PlannerParams(n_samples=10, base_seed=11, workers=workers)
        nominal = _zero_nominal(sc.model, params)
        outs.append(sacbp_control_update(sc.initial_state, nominal, sc.model, params, epoch=3))
    for o in outs[1:]:
        np.testing.assert_array_equal(o.control.values, outs[0].control.values)
        np.testing.assert_array_equal(o.mean_rho, outs[0].mean_rho)


def test_sample_seeds_are_distinct():
    states = {tuple(sample_seed(0, e, i).generate_state(2)) for e in range(5) for i in range(10)}
    assert len(states) == 50


def test_monte_carlo_halves_agree_with_full_set():
    """Two disjoint half-size sets, averaged, match a full-size set without systematic drift."""
    model = make_linear_fixture(2, 3)
    x0 = linear_initial_belief(model, 3)
    lo, hi = model.box_lo, model.box_hi
    H = model.control_matrix(x0)

    def nu_star(mean_rho, params):
        lin = mean_rho @ H
        taus = params.dt_ctrl * params.tau_indices()
        return optimize_perturbation(taus, lin, np.zeros(len(taus)), model.control_cost, lo, hi).nu_star

    diffs = []
    for k in range(12):
        full = PlannerParams(horizon=1.0, dt_obs=0.5, dt_ctrl=0.01, eps=0.1, t_calc=0.1, n_samples=20, base_seed=3 * k)
        half_a = PlannerParams(**{**full.__dict__, "n_samples": 10, "base_seed": 3 * k + 1})
        half_b = PlannerParams(**{**full.__dict__, "n_samples": 10, "base_seed": 3 * k + 2})
        nominal = _zero_nominal(model, full)
        rho_full = sacbp_control_update(x0, nominal, model, full).mean_rho
        rho_a = sacbp_control_update(x0, nominal, model, half_a).mean_rho
        rho_b = sacbp_control_update(x0, nominal, model, half_b).mean_rho
        diffs.append(nu_star(rho_full, full) - nu_star(0.5 * (rho_a + rho_b), full))
    diffs = np.array(diffs)
    se = diffs.std(ddof=1) / np.sqrt(diffs.size)
    assert abs(diffs.mean()) <= 3 * se + 1e-12


class FlakyToy:
    """Wraps a model so that each observation fails with probability one half."""

    def __init__(self, base):
        self.base = base

    def __getattr__(self, name):
        return getattr(self.base, name)

    def sample_observation(self, x_pre, rng):
        if rng.integers(2):
            raise FilterError("synthetic failure")
        return np.zeros(1)


def _expected_failures(base_seed, n, n_jumps):
    fails = 0
    for i in range(n):
        rng = np.random.default_rng(sample_seed(base_seed, 0, i))
        fails += any(rng.integers(2) for _ in range(n_jumps))
    return fails


def test_failed_rollouts_are_dropped_or_abort(toy):
    model = FlakyToy(toy(2, a=-0.2, terminal=0.0, cu=1.0))
    model.terminal_cost_grad = lambda x: np.asarray(x, float)
    params = PlannerParams(horizon=1.0, dt_obs=0.5, dt_ctrl=0.01, eps=0.1, t_calc=0.1, n_samples=6)
    seen = set()
    for seed in range(40):
        p = PlannerParams(**{**params.__dict__, "base_seed": seed})
        fails = _expected_failures(seed, 6, 2)
        nominal = _zero_nominal(model, p)
        if fails > 3:
            with pytest.raises(PlannerError):
                sacbp_control_update(np.ones(2), nominal, model, p)
            seen.add("abort")
        else:
            out = sacbp_control_update(np.ones(2), nominal, model, p)
            assert (out.n_failed, out.n_effective) == (fails, 6 - fails)
            seen.add("drop" if fails else "clean")
    assert {"abort", "drop"} <= seen


# --- mode insertion gradient -----------------------------------------------------------


def test_deterministic_fd_converges_first_order():
    rel, ratio, _ = deterministic_fd_check()
    assert rel <= 0.01
    assert 1.5 <= ratio <= 2.5


def test_nominal_insertion_gives_zero_fd():
    model = Mixed1DModel()
    nominal = ControlSchedule.constant(0.0, 1e-3, 1000, np.array([0.4]), model.box_lo, model.box_hi)
    res = mode_insertion_gradient_fd(model, nominal, np.array([0.5, 1.0, 1.0]), 0.3, np.array([0.4]), [1e-2, 5e-3],
                                     16, 0, horizon=1.0, dt_ctrl=1e-3, dt_obs=0.5)
    t = np.divide(res.fd_mean, res.fd_se, out=np.zeros_like(res.fd_mean), where=res.fd_se > 0)
    assert np.all(np.abs(t) < 3)
    assert res.nu_mean == 0.0


def test_fd_rejects_large_eps():
    model = Mixed1DModel()
    nominal = ControlSchedule.constant(0.0, 1e-2, 100, np.zeros(1), model.box_lo, model.box_hi)
    with pytest.raises(ValueError):
        mode_insertion_gradient_fd(model, nominal, np.array([0.5, 1.0, 1.0]), 0.1, np.ones(1), [0.2], 4, 0,
                                   horizon=1.0, dt_ctrl=1e-2, dt_obs=0.5)


# --- receding horizon and logging ----------------------------------------------------


def test_metrics_csv_format():
    log = MetricsLog()
    log.add(0.2, {"b": 1 / 3, "a": np.pi})
    text = log.to_csv()
    lines = text.splitlines()
    assert lines[0] == "t,metric,value"
    assert lines[1].split(",")[1] == "a"
    assert float(lines[2].split(",")[2]) == 1 / 3
    assert float(lines[1].split(",")[0]) == 0.2
    assert text.endswith("\n")
    np.testing.assert_array_equal(log.series("a"), [[0.2, np.pi]])


def test_noise_free_static_world_keeps_metrics_constant():
    sc = make_linear_scenario(2, 0, noise=False, zero_dynamics=True, zero_cost=True)
    params = PlannerParams(horizon=1.0, dt_obs=0.5, dt_ctrl=0.01, eps=0.1, t_calc=0.1)
    log = receding_horizon_run(sc, NominalController(sc.model, params), 5.0, 0)
    for name in {n for _, n, _ in log.rows}:
        values = log.series(name)[:, 1]
        assert np.all(values == values[0])


def test_tracking_run_emits_one_row_per_epoch():
    sc = make_tracking_scenario()
    params = PlannerParams()
    log = receding_horizon_run(sc, NominalController(sc.model, params), 200.0, 0)
    series = log.series("worst_entropy")
    assert series.shape == (1000, 2)
    np.testing.assert_allclose(series[:, 0], 0.2 * np.arange(1, 1001))
    assert log.summary["n_updates"] == 1000
    assert not log.summary["failed"]


def test_manipulation_run_emits_residual_history():
    from sacbp.scenarios import make_manipulation_scenario

    sc = make_manipulation_scenario()
    params = PlannerParams(eps=0.04)
    log = receding_horizon_run(sc, NominalController(sc.model, params), 20.0, 0)
    series = log.series("residual_norm")
    assert series.shape == (100, 2)
    assert np.all(np.isfinite(series))
    assert log.summary["initial"]["residual_norm"] > 0
