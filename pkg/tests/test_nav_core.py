import numpy as np
import pytest
from scipy.linalg import expm
from scipy.spatial.transform import Rotation

from DualBranchINS.eskf import correct_nominal
from DualBranchINS.nav_core import (
    ATT,
    GRAVITY,
    STATE_DIM,
    VEL,
    GimbalLockError,
    ImuSample,
    NavState,
    NoiseSpec,
    error_dynamics,
    euler_rate_map,
    expm_series,
    from_state_vector,
    process_noise,
    propagate_nominal,
    skew,
    state_error,
    state_jacobian,
    state_transition,
    to_state_covariance,
    to_state_vector,
    wrap_angle,
)

from helpers import random_spd, random_state

AT_REST = ImuSample(0.01, (0.0, 0.0, -GRAVITY), (0.0, 0.0, 0.0))


def test_static_equilibrium_single_step():
    state = NavState.from_euler()
    out = propagate_nominal(state, AT_REST, 0.01)
    np.testing.assert_array_equal(out.p_ned, state.p_ned)
    np.testing.assert_array_equal(out.v_ned, state.v_ned)
    assert (out.rotation.inv() * state.rotation).magnitude() < 1e-15


def test_static_equilibrium_many_steps():
    state = NavState.from_euler(p_ned=(10.0, -3.0, -50.0))
    start = state
    for _ in range(1000):
        state = propagate_nominal(state, AT_REST, 0.01)
    assert np.max(np.abs(state.p_ned - start.p_ned)) < 1e-9
    assert np.max(np.abs(state.v_ned)) < 1e-9
    assert abs(np.linalg.norm(state.att) - 1.0) < 1e-9


def test_constant_acceleration_closed_form():
    state = NavState.from_euler()
    imu = ImuSample(1.0, (1.0, 0.0, -GRAVITY), (0.0, 0.0, 0.0))
    out = propagate_nominal(state, imu, 1.0)
    np.testing.assert_allclose(out.v_ned, [1.0, 0.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(out.p_ned, [0.5, 0.0, 0.0], atol=1e-12)


def test_single_axis_rotation():
    state = NavState.from_euler()
    imu = ImuSample(1.0, (0.0, 0.0, -GRAVITY), (0.0, 0.0, np.pi / 2))
    roll, pitch, yaw = propagate_nominal(state, imu, 1.0).euler
    assert yaw == pytest.approx(np.pi / 2, abs=1e-12)
    assert abs(roll) < 1e-9
    assert abs(pitch) < 1e-9


def test_biases_are_removed_before_integration():
    state = NavState.from_euler(b_a=(0.1, 0.0, 0.0), b_g=(0.0, 0.0, 0.01))
    imu = ImuSample(0.01, (0.1, 0.0, -GRAVITY), (0.0, 0.0, 0.01))
    out = propagate_nominal(state, imu, 0.01)
    np.testing.assert_allclose(out.v_ned, 0.0, atol=1e-15)
    assert out.rotation.magnitude() < 1e-15


def test_quaternion_norm_preserved(rng):
    state = random_state(rng)
    for k in range(500):
        imu = ImuSample(0.01 * (k + 1), rng.normal(0.0, 3.0, 3), rng.normal(0.0, 0.5, 3))
        state = propagate_nominal(state, imu, 0.01)
        assert abs(np.linalg.norm(state.att) - 1.0) < 1e-9


@pytest.mark.parametrize("dt", [0.0, -0.01, np.nan])
def test_propagation_rejects_bad_step(dt):
    with pytest.raises(ValueError):
        propagate_nominal(NavState.from_euler(), AT_REST, dt)


def test_non_finite_inputs_rejected():
    with pytest.raises(ValueError):
        ImuSample(0.0, (np.nan, 0.0, 0.0), (0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        NavState.from_euler(p_ned=(np.inf, 0.0, 0.0))


def test_velocity_attitude_coupling_at_level():
    F = error_dynamics(NavState.from_euler(), AT_REST)
    expected = np.array([
        [0.0, -GRAVITY, 0.0],
        [GRAVITY, 0.0, 0.0],
        [0.0, 0.0, 0.0],
    ])
    np.testing.assert_allclose(F[VEL, ATT], expected, atol=1e-15)
    np.testing.assert_allclose(F[VEL, ATT], -skew([0.0, 0.0, -GRAVITY]), atol=1e-15)


def test_error_model_is_nilpotent(rng):
    F = error_dynamics(random_state(rng), ImuSample(0.0, rng.normal(0.0, 5.0, 3), (0.0, 0.0, 0.0)))
    np.testing.assert_array_equal(np.linalg.matrix_power(F, 4), np.zeros((STATE_DIM, STATE_DIM)))


def test_transition_matches_reference_exponential(rng):
    state = random_state(rng)
    imu = ImuSample(0.0, rng.normal(0.0, 5.0, 3), rng.normal(0.0, 0.1, 3))
    F = error_dynamics(state, imu)
    phi = state_transition(state, imu, 0.01)
    np.testing.assert_allclose(phi, expm(F * 0.01), atol=1e-12)

    series = np.eye(STATE_DIM)
    term = np.eye(STATE_DIM)
    for k in range(1, 21):
        term = term @ (F * 0.01) / k
        series = series + term
    np.testing.assert_allclose(phi, series, atol=1e-12)


def test_series_exponential_of_dense_matrix(rng):
    A = 0.5 * rng.normal(size=(6, 6))
    np.testing.assert_allclose(expm_series(A), expm(A), rtol=1e-10, atol=1e-10)


def test_transition_tends_to_identity():
    phi = state_transition(NavState.from_euler(), AT_REST, 1e-9)
    assert np.max(np.abs(phi - np.eye(STATE_DIM))) < 1e-6


def test_transition_semigroup(rng):
    state = random_state(rng)
    imu = ImuSample(0.0, rng.normal(0.0, 5.0, 3), (0.0, 0.0, 0.0))
    phi_1 = state_transition(state, imu, 0.013)
    phi_2 = state_transition(state, imu, 0.021)
    phi_12 = state_transition(state, imu, 0.034)
    np.testing.assert_allclose(phi_1 @ phi_2, phi_12, atol=1e-8)


def test_first_order_transition():
    state = NavState.from_euler(v_ned=(5.0, 0.0, 0.0))
    F = error_dynamics(state, AT_REST)
    phi = state_transition(state, AT_REST, 0.02, phi_mode="first-order")
    np.testing.assert_array_equal(phi, np.eye(STATE_DIM) + F * 0.02)
    with pytest.raises(ValueError):
        state_transition(state, AT_REST, 0.02, phi_mode="second-order")


def test_process_noise_zero_densities():
    Q = process_noise(NoiseSpec(0.0, 0.0, 0.0, 0.0), 0.01)
    np.testing.assert_array_equal(Q, np.zeros((STATE_DIM, STATE_DIM)))


def test_process_noise_velocity_block_at_level():
    sigma_a = 0.02
    Q = process_noise(NoiseSpec(sigma_a, 0.0, 0.0, 0.0), 0.01, np.eye(3))
    np.testing.assert_allclose(Q[VEL, VEL], sigma_a ** 2 * 0.01 * np.eye(3), rtol=1e-12)
    np.testing.assert_array_equal(Q[ATT, ATT], np.zeros((3, 3)))


def test_process_noise_linear_in_step(rng):
    dcm = Rotation.from_rotvec(rng.normal(0.0, 0.5, 3)).as_matrix()
    spec = NoiseSpec()
    np.testing.assert_allclose(process_noise(spec, 0.02, dcm), 2.0 * process_noise(spec, 0.01, dcm), rtol=1e-12, atol=1e-18)


def test_negative_density_rejected():
    with pytest.raises(ValueError):
        NoiseSpec(accel_density=-1e-3)


def test_zero_state_vector():
    np.testing.assert_allclose(to_state_vector(NavState.from_euler()), np.zeros(STATE_DIM), atol=1e-15)


def test_altitude_sign_convention():
    x15 = to_state_vector(NavState.from_euler(p_ned=(0.0, 0.0, -100.0)))
    assert x15[2] == 100.0
    back = from_state_vector(x15)
    assert back.p_ned[2] == -100.0


def test_state_vector_round_trip(rng):
    for _ in range(200):
        state = NavState.from_euler(
            p_ned=rng.normal(0.0, 100.0, 3),
            v_ned=rng.normal(0.0, 10.0, 3),
            euler=(rng.uniform(-np.pi, np.pi), rng.uniform(-np.radians(80), np.radians(80)), rng.uniform(-np.pi, np.pi)),
            b_a=rng.normal(0.0, 0.1, 3),
            b_g=rng.normal(0.0, 0.01, 3),
        )
        x15 = to_state_vector(state)
        back = from_state_vector(x15, ref=state)
        np.testing.assert_allclose(back.p_ned, state.p_ned, atol=1e-12)
        np.testing.assert_allclose(back.v_ned, state.v_ned, atol=1e-12)
        np.testing.assert_allclose(back.att, state.att, atol=1e-12)
        np.testing.assert_allclose(to_state_vector(back), x15, atol=1e-12)


@pytest.mark.filterwarnings("ignore::UserWarning")
def test_gimbal_lock_rejected():
    x15 = np.zeros(STATE_DIM)
    x15[7] = np.pi / 2
    with pytest.raises(GimbalLockError):
        from_state_vector(x15)
    with pytest.raises(GimbalLockError):
        to_state_vector(NavState.from_euler(euler=(0.0, np.pi / 2, 0.0)))


def test_euler_rate_map_at_zero_attitude():
    np.testing.assert_array_equal(euler_rate_map((0.0, 0.0, 0.0)), np.eye(3))
    M = state_jacobian(NavState.from_euler())
    np.testing.assert_allclose(M[ATT, ATT], -np.eye(3), atol=1e-15)


def test_state_jacobian_matches_finite_differences(rng):
    state = random_state(rng)
    M = state_jacobian(state)
    h = 1e-6
    numeric = np.empty((STATE_DIM, STATE_DIM))
    for j in range(STATE_DIM):
        dx = np.zeros(STATE_DIM)
        dx[j] = h
        plus = to_state_vector(correct_nominal(state, dx))
        dx[j] = -h
        minus = to_state_vector(correct_nominal(state, dx))
        diff = plus - minus
        diff[8] = wrap_angle(diff[8])
        numeric[:, j] = diff / (2 * h)
    np.testing.assert_allclose(numeric, M, atol=1e-5)


def test_state_covariance_mapping(rng):
    state = random_state(rng)
    P = random_spd(rng)
    P15 = to_state_covariance(state, P)
    M = state_jacobian(state)
    np.testing.assert_allclose(P15, M @ P @ M.T, atol=1e-12)
    np.testing.assert_array_equal(P15, P15.T)

    level = to_state_covariance(NavState.from_euler(), P)
    np.testing.assert_allclose(level[ATT, ATT], P[ATT, ATT], atol=1e-12)


def test_state_error_inverts_correction(rng):
    reference = random_state(rng)
    estimate = reference.replace(
        p_ned=reference.p_ned + rng.normal(0.0, 2.0, 3),
        v_ned=reference.v_ned + rng.normal(0.0, 0.2, 3),
        att=(Rotation.from_rotvec(rng.normal(0.0, 1e-3, 3)) * reference.rotation).as_quat(),
        b_a=reference.b_a + rng.normal(0.0, 0.01, 3),
    )
    corrected = correct_nominal(estimate, state_error(estimate, reference))
    np.testing.assert_allclose(corrected.p_ned, reference.p_ned, atol=1e-12)
    np.testing.assert_allclose(corrected.v_ned, reference.v_ned, atol=1e-12)
    np.testing.assert_allclose(corrected.b_a, reference.b_a, atol=1e-15)
    assert (corrected.rotation.inv() * reference.rotation).magnitude() < 1e-6
    np.testing.assert_allclose(state_error(reference, reference), np.zeros(STATE_DIM), atol=1e-14)


@pytest.mark.parametrize("angle, expected", [
    (0.5, 0.5),
    (np.pi, np.pi),
    (-np.pi, np.pi),
    (2 * np.pi + 0.5, 0.5),
    (-np.pi - 0.25, np.pi - 0.25),
])
def test_wrap_angle(angle, expected):
    assert wrap_angle(angle) == pytest.approx(expected, abs=1e-12)
