from dataclasses import replace

import numpy as np
import pytest

from DualBranchINS.constraint_branch import (
    EnvelopeBounds,
    branch_constraint_set,
    constrained_gain_update,
    nhc_update,
)
from DualBranchINS.eskf import (
    FilterConfig,
    FilterState,
    correct_nominal,
    gnss_update,
    initial_state,
    joseph_covariance,
    kalman_gain,
    predict,
)
from DualBranchINS.nav_core import (
    ACC_BIAS,
    GRAVITY,
    GYRO_BIAS,
    POS,
    STATE_DIM,
    GnssFix,
    ImuSample,
    NavState,
    NoiseSpec,
    process_noise,
)
from DualBranchINS_harness.experiment import ExperimentSpec, Scenario, Variant, run_variant
from DualBranchINS_harness.trajectory import ImuErrorSpec, gen_synthetic

from helpers import random_spd, random_state

QUIET = NoiseSpec(0.0, 0.0, 0.0, 0.0)


def _assert_healthy(P):
    np.testing.assert_allclose(P, P.T, atol=1e-9)
    assert np.min(np.linalg.eigvalsh(P)) >= -1e-9


def test_predict_without_noise_over_tiny_step(rng):
    P = random_spd(rng)
    cfg = FilterConfig(q_spec=QUIET, p0=P)
    fs = initial_state(NavState.from_euler(), 0.0, cfg)
    out = predict(fs, ImuSample(1e-9, (0.0, 0.0, -GRAVITY), (0.0, 0.0, 0.0)), cfg)
    np.testing.assert_allclose(out.P, P, atol=1e-6)


def test_predict_from_zero_covariance_adds_process_noise(rng):
    state = random_state(rng)
    cfg = FilterConfig(p0=np.zeros((STATE_DIM, STATE_DIM)))
    fs = initial_state(state, 0.0, cfg)
    out = predict(fs, ImuSample(0.01, (0.0, 0.0, -GRAVITY), (0.0, 0.0, 0.0)), cfg)
    np.testing.assert_allclose(out.P, process_noise(cfg.q_spec, 0.01, state.dcm), atol=1e-20)


def test_predict_keeps_covariance_healthy_and_growing(rng):
    cfg = FilterConfig(p0=np.diag(rng.uniform(0.01, 1.0, STATE_DIM)))
    fs = initial_state(NavState.from_euler(), 0.0, cfg)
    trace = np.trace(fs.P)
    for k in range(1, 101):
        fs = predict(fs, ImuSample(0.01 * k, (0.0, 0.0, -GRAVITY), (0.0, 0.0, 0.0)), cfg)
        _assert_healthy(fs.P)
        assert np.trace(fs.P) >= trace
        trace = np.trace(fs.P)


@pytest.mark.parametrize("t", [0.0, -0.5])
def test_predict_rejects_stale_timestamp(cfg, t):
    fs = initial_state(NavState.from_euler(), 0.0, cfg)
    with pytest.raises(ValueError):
        predict(fs, ImuSample(t, (0.0, 0.0, -GRAVITY), (0.0, 0.0, 0.0)), cfg)


def test_zero_innovation_contracts_covariance(cfg, rng):
    state = random_state(rng)
    fs = initial_state(state, 1.0, cfg)
    out = gnss_update(fs, GnssFix(1.0, state.p_ned, 3.5), cfg)
    np.testing.assert_array_equal(out.nominal.p_ned, state.p_ned)
    np.testing.assert_array_equal(out.nominal.att, state.att)
    assert np.trace(out.P) < np.trace(fs.P)
    _assert_healthy(out.P)


def test_uninformative_fix_leaves_state(rng):
    cfg = FilterConfig(r_gnss=np.eye(3) * 1e12)
    state = random_state(rng)
    fs = initial_state(state, 0.0, cfg)
    out = gnss_update(fs, GnssFix(0.0, state.p_ned + (5.0, -3.0, 2.0), 1e6), cfg)
    np.testing.assert_allclose(out.nominal.p_ned, state.p_ned, atol=1e-6)
    np.testing.assert_allclose(out.nominal.v_ned, state.v_ned, atol=1e-6)


def test_scalar_kalman_step():
    cfg = FilterConfig(r_gnss=np.eye(3), p0=np.eye(STATE_DIM))
    fs = initial_state(NavState.from_euler(), 0.0, cfg)
    K = kalman_gain(fs.P, np.hstack((np.eye(3), np.zeros((3, 12)))), cfg.r_gnss)
    np.testing.assert_allclose(K[POS], 0.5 * np.eye(3), atol=1e-15)

    out = gnss_update(fs, GnssFix(0.0, (2.0, 0.0, 0.0), 1.0), cfg)
    np.testing.assert_allclose(np.diag(out.P)[POS], 0.5, atol=1e-15)
    # innovation is predicted minus measured, and the correction subtracts dp
    np.testing.assert_allclose(out.nominal.p_ned, (1.0, 0.0, 0.0), atol=1e-15)


def test_fix_far_from_epoch_rejected(cfg):
    fs = initial_state(NavState.from_euler(), 10.0, cfg)
    with pytest.raises(ValueError):
        gnss_update(fs, GnssFix(11.0, (0.0, 0.0, 0.0), 3.5), cfg)


def test_singular_innovation_covariance():
    with pytest.raises(np.linalg.LinAlgError):
        kalman_gain(np.zeros((STATE_DIM, STATE_DIM)), np.hstack((np.eye(3), np.zeros((3, 12)))), np.zeros((3, 3)))


def test_joseph_form_healthy_for_any_gain(rng):
    H = np.hstack((np.eye(3), np.zeros((3, 12))))
    R = np.diag(rng.uniform(0.5, 5.0, 3))
    for _ in range(200):
        P = random_spd(rng)
        K = rng.normal(0.0, 2.0, (STATE_DIM, 3))
        _assert_healthy(joseph_covariance(P, K, H, R))


def test_bias_block_stays_psd(cfg, rng):
    fs = initial_state(random_state(rng), 0.0, cfg)
    for k in range(1, 51):
        fs = predict(fs, ImuSample(0.1 * k, rng.normal(0.0, 1.0, 3) + (0.0, 0.0, -GRAVITY), rng.normal(0.0, 0.01, 3)), cfg)
        fs = gnss_update(fs, GnssFix(fs.t, fs.nominal.p_ned + rng.normal(0.0, 3.5, 3), 3.5), cfg)
        for block in (ACC_BIAS, GYRO_BIAS):
            assert np.min(np.linalg.eigvalsh(fs.P[block, block])) >= -1e-12


def test_correct_nominal_examples():
    state = NavState.from_euler(p_ned=(1.0, 2.0, 3.0), v_ned=(4.0, 5.0, 6.0))
    unchanged = correct_nominal(state, np.zeros(STATE_DIM))
    np.testing.assert_array_equal(unchanged.p_ned, state.p_ned)
    np.testing.assert_array_equal(unchanged.att, state.att)

    dx = np.zeros(STATE_DIM)
    dx[0] = 1.0
    np.testing.assert_allclose(correct_nominal(state, dx).p_ned, (0.0, 2.0, 3.0))

    dx = np.zeros(STATE_DIM)
    dx[6] = 0.01
    roll = correct_nominal(NavState.from_euler(), dx).euler[0]
    assert abs(roll + 0.01) < 1e-4

    dx = np.zeros(STATE_DIM)
    dx[9:12] = (0.1, 0.2, 0.3)
    np.testing.assert_allclose(correct_nominal(state, dx).b_a, (0.1, 0.2, 0.3))


def test_filter_state_rejects_bad_covariance():
    with pytest.raises(ValueError):
        FilterState(NavState.from_euler(), np.eye(3), 0.0)
    with pytest.raises(ValueError):
        FilterConfig(p0=-np.eye(STATE_DIM))
    with pytest.raises(ValueError):
        FilterConfig(projection_weighting="block")


@pytest.mark.slow
def test_static_position_converges_below_gnss_noise():
    errors = ImuErrorSpec(accel_density=0.005, gyro_density=5e-4)
    spec = ExperimentSpec(scenario=Scenario.FULL_GNSS, variant=Variant.EKF, gnss_rate=10.0)
    tail_rms = []
    for seed in range(5):
        log = gen_synthetic("static", duration=20.0, rate=50.0, imu_errors=errors, seed=seed)
        result = run_variant(log, replace(spec, seed=seed))
        tail = result.metrics.t >= 15.0
        tail_rms.append(np.sqrt(np.mean(np.sum(result.metrics.position_error[tail] ** 2, axis=1))))
    # a single fix has a 3D error of about sqrt(3) * 3.5 m
    assert np.mean(tail_rms) < 2.0


@pytest.mark.slow
def test_covariance_health_over_long_mixed_run(cfg, rng):
    bounds = EnvelopeBounds(-5.0, 5.0, -0.3, 0.3, -0.3, 0.3, v_max=5.0)
    fs = initial_state(NavState.from_euler(), 0.0, cfg)
    accel = rng.normal(0.0, 0.05, (100_000, 3)) + (0.0, 0.0, -GRAVITY)
    gyro = rng.normal(0.0, 1e-3, (100_000, 3))
    for k in range(1, 100_000):
        fs = predict(fs, ImuSample(0.01 * k, accel[k], gyro[k]), cfg)
        if k % 100 == 0:
            fix = GnssFix(fs.t, rng.normal(0.0, 3.5, 3), 3.5)
            if k % 200 == 0:
                fs = gnss_update(fs, fix, cfg)
            else:
                cs = branch_constraint_set(fs.nominal, True, bounds)
                fs = constrained_gain_update(fs, fix, cs, cfg)
        elif k % 10 == 0:
            fs = nhc_update(fs, cfg.r_nhc)
        assert np.max(np.abs(fs.P - fs.P.T)) <= 1e-9
        assert np.min(np.linalg.eigvalsh(fs.P)) >= -1e-9
