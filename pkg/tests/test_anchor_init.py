import numpy as np
import pytest

from helpers import build_init_window, navstate_to_truth
from uwbtr.anchor_init import (
    DegenerateGeometry, HeightPrior, analytic_anchor_seed, build_map_problem,
    dead_reckon_window, solve_anchor_map,
)
from uwbtr.batch import NonConvergence
from uwbtr.config import EstimatorPriors
from uwbtr.ekf import ImuInput, NavState
from uwbtr.ranging import (
    RangeMeasurementSet, TagGeometry, predict_ranges,
)
from uwbtr.world import DEFAULT_TAG_OFFSETS, GRAVITY, SensorSpec

TAGS = TagGeometry(DEFAULT_TAG_OFFSETS)
PRIOR = HeightPrior(h=2.0, var=0.25)


def noise_free_spec():
    return SensorSpec().zero_noise()


def range_set_at(state, anchor):
    y = predict_ranges(state.C, state.r, state.clock_offsets, anchor, TAGS)
    return RangeMeasurementSet.from_vec(1, y)


def test_analytic_seed_recovers_anchor_at_prior_height():
    state = NavState.origin()
    state.r = np.array([1.0, 0.5, 1.2])
    anchor = np.array([6.0, -3.0, 2.0])
    seed = analytic_anchor_seed(range_set_at(state, anchor), state, TAGS, h=2.0)
    np.testing.assert_allclose(seed, anchor, atol=1e-6)


def test_analytic_seed_wrong_height_still_in_basin():
    """Seed is biased when the anchor is off the prior height, but the batch
    solve still converges to the truth from it."""
    anchor = np.array([4.0, 2.0, 2.5])  # 0.5 m above the prior height
    window, _ = build_init_window(3, lam=100, spec=noise_free_spec(), noisy=False,
                                  anchor_true=anchor)
    state0 = window.belief.state
    seed = analytic_anchor_seed(window.range_sets[0][1], state0, TAGS, h=2.0)
    assert np.linalg.norm(seed - anchor) > 0.05  # visibly biased
    _, _, est, _ = solve_anchor_map(window, PRIOR, noise_free_spec(), TAGS)
    np.testing.assert_allclose(est, anchor, atol=1e-4)


def test_collinear_projection_degenerate():
    tags = TagGeometry(np.array([[0.2, 0.0, 0.0], [0.0, 0.0, 0.1], [-0.2, 0.0, 0.05]]))
    state = NavState.origin()
    anchor = np.array([5.0, 0.0, 2.0])
    y = predict_ranges(state.C, state.r, state.clock_offsets, anchor, tags)
    with pytest.raises(DegenerateGeometry):
        analytic_anchor_seed(RangeMeasurementSet.from_vec(1, y), state, tags, h=2.0)


def test_dead_reckon_window_matches_truth_noise_free():
    window, _ = build_init_window(5, lam=50, spec=noise_free_spec(), noisy=False)
    states = dead_reckon_window(window.belief.state, window.imu)
    assert len(states) == 51
    # replaying the IMU from the exact start must land on the truth
    from uwbtr.world import step_truth, ControlCommand

    truth = navstate_to_truth(window.belief.state)
    rng = np.random.default_rng(0)
    for u in window.imu:
        a_body = u.accel + truth.accel_bias
        kin_omega = u.gyro + truth.gyro_bias
        truth, _ = step_truth(
            truth,
            ControlCommand(f=float(a_body[2]), omega=kin_omega),
            u.dt, noise_free_spec(), rng,
        )
    np.testing.assert_allclose(states[-1].r, truth.pose.r, atol=1e-9)


def test_dead_reckon_empty_window():
    state = NavState.origin()
    states = dead_reckon_window(state, [])
    assert len(states) == 1
    np.testing.assert_array_equal(states[0].r, state.r)


def test_map_noise_free_fixpoint():
    anchor = np.array([5.5, -1.0, 2.0])
    window, _ = build_init_window(11, lam=100, spec=noise_free_spec(), noisy=False,
                                  anchor_true=anchor)
    states, P_end, est, info = solve_anchor_map(window, PRIOR, noise_free_spec(), TAGS)
    np.testing.assert_allclose(est, anchor, atol=1e-4)
    truth = dead_reckon_window(window.belief.state, window.imu)
    for s, t in zip(states, truth):
        np.testing.assert_allclose(s.r, t.r, atol=1e-5)
        np.testing.assert_allclose(s.v, t.v, atol=1e-5)
    assert np.all(np.isfinite(P_end))
    assert np.linalg.eigvalsh(0.5 * (P_end + P_end.T)).min() > 0.0


def test_mirror_seed_recovers_above_floor():
    """Starting from the below-floor mirror solution, the height prior pulls
    the solve back above ground."""
    anchor = np.array([6.0, 1.5, 2.0])
    window, _ = build_init_window(13, lam=100, spec=noise_free_spec(), noisy=False,
                                  anchor_true=anchor)
    mirror = np.array([anchor[0], anchor[1], -2.0])
    _, _, est, _ = solve_anchor_map(
        window, PRIOR, noise_free_spec(), TAGS, anchor_seed=mirror
    )
    assert est[2] > 0.0
    np.testing.assert_allclose(est, anchor, atol=1e-3)


def test_lm_cost_monotone_and_gradient_small():
    window, anchor = build_init_window(17, lam=100)
    _, _, _, info = solve_anchor_map(window, PRIOR, SensorSpec(), TAGS)
    hist = info["history"]
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))
    assert info["grad_norm"] < 1e-8


def test_window_with_active_anchor_measurements():
    active_pos = np.array([-3.0, 4.0, 2.2])
    anchor = np.array([5.0, 2.0, 1.8])
    window, _ = build_init_window(23, lam=100, spec=noise_free_spec(), noisy=False,
                                  anchor_true=anchor, active_anchor=active_pos)
    assert any(p is not None for _, _, p in window.range_sets)
    _, _, est, _ = solve_anchor_map(window, PRIOR, noise_free_spec(), TAGS)
    np.testing.assert_allclose(est, anchor, atol=1e-4)


def test_too_little_motion_rejected():
    window, _ = build_init_window(29, lam=100, spec=noise_free_spec(), noisy=False)
    static = ImuInput(np.array([0.0, 0.0, GRAVITY]), np.zeros(3), 0.01)
    window.imu = [static] * len(window.imu)  # no motion between range sets
    with pytest.raises(DegenerateGeometry):
        solve_anchor_map(window, PRIOR, noise_free_spec(), TAGS)


def test_map_cost_jacobian_finite_difference():
    """Analytic Jacobian of the whitened MAP residual matches central FD."""
    rng = np.random.default_rng(31)
    window, _ = build_init_window(37, lam=30)
    residuals, retract, col_scale, a_col = build_map_problem(
        window, PRIOR, SensorSpec(), TAGS
    )
    states = dead_reckon_window(window.belief.state, window.imu)
    # move off the optimum so the manifold terms are exercised
    n = a_col + 3
    dx0 = rng.standard_normal(n) * 1e-3
    x = retract((states, np.array([5.0, -2.0, 2.0])), dx0)
    r0, J = residuals(x)
    J = np.asarray(J.todense())
    cols = rng.choice(n, size=40, replace=False)
    for c in cols:
        h = 1e-6
        dx = np.zeros(n)
        dx[c] = h
        rp, _ = residuals(retract(x, dx))
        rm, _ = residuals(retract(x, -dx))
        fd = (rp - rm) / (2 * h)
        scale = max(1.0, np.abs(J[:, c]).max())
        np.testing.assert_allclose(fd, J[:, c], rtol=1e-5, atol=1e-6 * scale)


def test_randomized_noise_free_windows():
    # noise-free: biases and clocks are exactly known, so the priors say so
    tight = EstimatorPriors(accel_bias_std=0.0, gyro_bias_std=0.0,
                            clock_offset_std=0.0, clock_skew_std=0.0)
    rng = np.random.default_rng(101)
    for trial in range(10):
        anchor = np.array([
            rng.uniform(3.0, 9.0), rng.uniform(-5.0, 5.0), rng.uniform(0.8, 3.5),
        ])
        window, _ = build_init_window(1000 + trial, lam=150,
                                      spec=noise_free_spec(), noisy=False,
                                      anchor_true=anchor, priors=tight)
        seed_sign = 1.0 if trial % 2 == 0 else -1.0
        seed = np.array([anchor[0], anchor[1], seed_sign * 2.0])
        _, _, est, _ = solve_anchor_map(
            window, PRIOR, noise_free_spec(), TAGS, anchor_seed=seed
        )
        assert np.linalg.norm(est - anchor) < 1e-3
        assert est[2] > 0.0
