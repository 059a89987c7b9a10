import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sacbp.adjoint import jacobian
from sacbp.filters import pack_belief, unpack_belief, unscented_update
from sacbp.hybrid import ControlSchedule
from sacbp.planner import PlannerParams, sacbp_control_update
from sacbp.scenarios import (
    TrackingConfig,
    linear_initial_belief,
    make_linear_fixture,
    make_manipulation_scenario,
    make_tracking_scenario,
)
from sacbp.scenarios.manipulation import N_OBJ, N_STATE, ManipulationConfig


@pytest.fixture(scope="module")
def manip():
    return make_manipulation_scenario()


# --- tracking -------------------------------------------------------------------


def test_identity_covariances_give_known_cost():
    sc = make_tracking_scenario(TrackingConfig(n_targets=20))
    m = sc.model
    x = m.initial_state([0.0, 0.0], np.zeros((20, 2)), 1.0)
    assert m.terminal_cost(x) == pytest.approx(20 * 2 * np.pi * np.e, rel=1e-12)
    assert m.terminal_cost(x) == pytest.approx(341.589, abs=5e-4)


@given(st.floats(-2, 2), st.floats(-2, 2))
def test_tracking_control_cost(u1, u2):
    m = make_tracking_scenario().model
    u = np.array([u1, u2])
    assert m.running_cost(np.zeros(m.n_x), u) == pytest.approx(0.05 * u @ u, rel=1e-15, abs=1e-300)


def test_tracking_is_control_affine():
    m = make_tracking_scenario().model
    assert m.check_control_affine(np.random.default_rng(0), 100) <= 1e-12


def test_tracking_cost_is_permutation_invariant():
    m = make_tracking_scenario().model
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = m.random_state(rng)
        means, covs = m.beliefs(x[2:])
        perm = rng.permutation(m.n_t)
        xp = np.concatenate([x[:2], m.pack(means[perm], covs[perm])])
        assert m.terminal_cost(xp) == pytest.approx(m.terminal_cost(x), rel=1e-13)


def test_tracking_jump_is_translation_invariant():
    m = make_tracking_scenario().model
    rng = np.random.default_rng(2)
    for _ in range(10):
        x = m.random_state(rng)
        y = rng.uniform(0.5, 5.0, m.n_t)
        shift = rng.uniform(-10, 10, 2)
        means, covs = m.beliefs(x[2:])
        xs = np.concatenate([x[:2] + shift, m.pack(means + shift, covs)])
        np.testing.assert_allclose(m.entropies(m.jump(xs, y)), m.entropies(m.jump(x, y)), rtol=1e-9)


def test_far_robot_learns_less():
    """Paired rollouts: the same noise draws, robot near vs far from every target."""
    sc = make_tracking_scenario()
    m = sc.model
    targets = sc.targets
    for seed in range(5):
        changes = []
        for robot in (targets.mean(axis=0), np.array([500.0, 500.0])):
            x = m.initial_state(robot, targets, 1.0)
            x_pre, _ = m.flow_interval(x, np.zeros(2), 20, 0.01)
            y = m.sample_observation(x_pre, np.random.default_rng(seed))
            before = m.entropies(x) + 0
            after = m.entropies(m.jump(x_pre, y))
            changes.append(np.abs(after - before) / before)
        near, far = changes
        assert np.all(far < near)


def test_tracking_config_validation():
    with pytest.raises(ValueError):
        TrackingConfig(n_targets=0)
    with pytest.raises(ValueError):
        TrackingConfig(Q=[[1.0, 0.0], [0.0, -1.0]])


# --- manipulation ---------------------------------------------------------------


def test_manipulation_is_control_affine(manip):
    assert manip.model.check_control_affine(np.random.default_rng(0), 100) <= 1e-12


def test_zero_input_keeps_object_stationary(manip):
    m = manip.model
    mu = manip.cfg.prior_mean()
    mu[3:6] = 0.0
    x = m.pack(mu, np.zeros((N_STATE, N_STATE)))
    dx = m.flow(x, np.zeros(3))
    dmu, dS = m.unpack(dx)
    np.testing.assert_array_equal(dmu, 0.0)
    np.testing.assert_allclose(dS, m.Q, atol=1e-15)


def test_flow_matches_true_simulator_bitwise(manip):
    m = manip.model
    rng = np.random.default_rng(3)
    for _ in range(10):
        latent = np.concatenate([rng.standard_normal(N_OBJ), manip.cfg.true_params()])
        u = rng.uniform(m.box_lo, m.box_hi)
        x = m.pack(latent, np.eye(N_STATE) * 0.01)
        assert np.array_equal(m.flow(x, u)[:N_STATE], m.true_flow(latent, u))


def test_manipulation_jacobians_match_fd(manip):
    m = manip.model
    rng = np.random.default_rng(4)
    for _ in range(3):
        x = m.random_state(rng)
        u = rng.uniform(m.box_lo, m.box_hi)
        y = m.predicted_observation(x) + 0.1 * rng.standard_normal(8)
        for analytic, fn in ((m.flow_jac(x, u), lambda z: m.flow(z, u)), (m.jump_jac(x, y), lambda z: m.jump(z, y))):
            numeric = jacobian(fn, x)
            scale = max(1.0, np.abs(analytic).max())
            assert np.abs(analytic - numeric).max() <= 1e-5 * scale


def test_known_parameters_track_ground_truth():
    cfg = ManipulationConfig(
        prior_mass=2.0, prior_inertia=1.0, prior_arm=[0.3, -0.2], prior_friction=0.8,
        prior_log_std=1e-9, prior_arm_std=1e-9, initial_state_std=1e-9,
        sensor_std=[1e-6, 1e-6, 1e-6], process_std=[0.0, 0.0, 0.0, 0.0],
    )
    sc = make_manipulation_scenario(cfg)
    m = sc.model
    latent = np.concatenate([cfg.prior_mean()[:N_OBJ], cfg.true_params()])
    x = sc.initial_state.copy()
    dt = 0.01
    for k in range(25):
        for j in range(20):
            u = sc.nominal_policy.control(0.0, x)
            latent = latent + dt * m.true_flow(latent, u)
            x = x + dt * m.flow(x, u)
        x = sc.filter_jump(x, m.measure(latent))
    assert np.abs(x[:N_STATE] - latent).max() <= 1e-3


def test_batched_matches_generic_update(manip):
    m = manip.model
    for nominal in (manip.nominal_policy,
                    ControlSchedule.constant(0.0, 0.01, 200, np.array([0.5, -0.3, 0.1]), m.box_lo, m.box_hi)):
        fast = PlannerParams(eps=0.04, n_samples=4, base_seed=5)
        slow = dataclasses.replace(fast, use_batched=False)
        a = sacbp_control_update(manip.initial_state, nominal, m, fast, epoch=2)
        b = sacbp_control_update(manip.initial_state, nominal, m, slow, epoch=2)
        np.testing.assert_allclose(a.mean_rho, b.mean_rho, rtol=1e-8, atol=1e-10 * np.abs(b.mean_rho).max())
        assert a.perturbation.tau_star == b.perturbation.tau_star
        np.testing.assert_allclose(a.perturbation.v_star, b.perturbation.v_star, rtol=1e-8, atol=1e-12)


def test_manipulation_config_validation():
    with pytest.raises(ValueError):
        ManipulationConfig(mass=0.0)
    with pytest.raises(ValueError):
        ManipulationConfig(C_u=[0.2, 0.0, 0.2])


# --- linear fixture ---------------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_linear_fixture_filters_agree_with_exact_kf(seed):
    model = make_linear_fixture(2, seed % 100)
    rng = np.random.default_rng(seed)
    x = linear_initial_belief(model, seed)
    C, R = model.C, model.R
    worst = 0.0
    for _ in range(20):
        x, _ = model.flow_interval(x, np.zeros(model.m), 10, 0.01)
        y = model.sample_observation(x, rng)
        mu, S = unpack_belief(x)
        Sy = C @ S @ C.T + R
        K = S @ C.T @ np.linalg.inv(Sy)
        exact = pack_belief(mu + K @ (y - C @ mu), S - K @ Sy @ K.T)
        ekf = model.jump(x, y)
        um, uc = unscented_update(mu[None], S[None], R[None], y[None],
                                  lambda q, v: np.einsum("qn,bsn->bsq", C, q) + v)
        ukf = pack_belief(um[0], uc[0])
        worst = max(worst, np.abs(ekf - exact).max(), np.abs(ukf - exact).max())
        x = exact
    assert worst <= 1e-8
