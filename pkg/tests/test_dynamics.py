import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uaav import dynamics as dyn
from uaav.dynamics import Mode, ParameterError, VehicleParams


def state(**kw):
    x = np.zeros(dyn.NX)
    for name, value in kw.items():
        x[dyn.STATE_NAMES.index(name)] = value
    return x


# --------------------------------------------------------------------------
# modes and densities


def test_density_table(params):
    w, a = params.rho_water, params.rho_air
    assert dyn.density_assignment(Mode.AIR, params) == dyn.DensityAssignment(1.22, 1.22, 1.22)
    assert dyn.density_assignment(Mode.WATER, params) == dyn.DensityAssignment(1000.0, 1000.0, 1000.0)
    assert dyn.density_assignment(Mode.TRANSITION_EXIT, params) == dyn.DensityAssignment(a, w, w)
    assert dyn.density_assignment(Mode.TRANSITION_ENTRY, params) == dyn.DensityAssignment(w, a, a)


def test_mode_parse_accepts_labels_names_and_numbers():
    assert Mode.parse("TransitionExit") is Mode.TRANSITION_EXIT
    assert Mode.parse("transition-exit") is Mode.TRANSITION_EXIT
    assert Mode.parse(2) is Mode.AIR
    assert Mode.parse("0") is Mode.WATER
    with pytest.raises(ValueError):
        Mode.parse("Space")


# --------------------------------------------------------------------------
# guards


@pytest.mark.parametrize("rz, theta, expected", [(0.0, 0.0, 0.0), (-1.0, 0.0, -1.0), (0.0, math.pi / 2, 0.3)])
def test_nose_guard(params, rz, theta, expected):
    assert params.nose_offset == pytest.approx(0.3)
    assert dyn.guard_psi1(state(r_z=rz, theta=theta), params) == pytest.approx(expected, abs=1e-15)


def _elevon_tip_height(rz, theta, delta, r_h, l_delta):
    """Independent composition: hinge point in the world, then the elevon
    center of pressure one elevon length behind the hinge in the deflected frame."""
    def rot(a):
        return np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    hinge = rot(theta) @ np.asarray(r_h)
    tip = hinge + rot(theta) @ rot(delta) @ np.array([-l_delta, 0.0])
    return rz + tip[1]


@pytest.mark.parametrize("rz, theta, delta, expected", [
    (0.0, 0.0, 0.0, 0.0),
    (-0.5, 0.0, 0.0, -0.5),
    (0.0, math.pi / 2, 0.0, -0.25),
])
def test_elevon_guard_examples(params, rz, theta, delta, expected):
    x = state(r_z=rz, theta=theta, delta=delta)
    assert dyn.guard_psi2(x, params) == pytest.approx(expected, abs=1e-15)
    assert _elevon_tip_height(rz, theta, delta, params.hinge_offset, params.elevon_length) == pytest.approx(expected)


@settings(max_examples=200, deadline=None)
@given(st.floats(-3, 3), st.floats(-math.pi, math.pi), st.floats(-1.2, 1.2))
def test_elevon_guard_matches_rotation_oracle(rz, theta, delta):
    p = VehicleParams()
    x = state(r_z=rz, theta=theta, delta=delta)
    assert dyn.guard_psi2(x, p) == pytest.approx(
        _elevon_tip_height(rz, theta, delta, p.hinge_offset, p.elevon_length), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.floats(-3, 3), st.floats(-math.pi, math.pi), st.floats(-1.2, 1.2))
def test_guard_gradients_match_finite_differences(rz, theta, delta):
    p = VehicleParams()
    x = state(r_z=rz, theta=theta, delta=delta)
    g1, g2 = dyn.guard_gradients(x, p)
    for grad, fun in ((g1, dyn.guard_psi1), (g2, dyn.guard_psi2)):
        fd = np.zeros(dyn.NX)
        for i in range(dyn.NX):
            e = np.zeros(dyn.NX)
            e[i] = 1e-6
            fd[i] = (fun(x + e, p) - fun(x - e, p)) / 2e-6
        np.testing.assert_allclose(grad, fd, atol=1e-8)


def test_transition_examples(params):
    # nose just above the surface, elevon still under
    x = state(r_z=0.01 - 0.3 * math.sin(0.4), theta=0.4)
    assert dyn.guard_psi1(x, params) == pytest.approx(0.01)
    assert dyn.mode_transition(x, Mode.WATER, params) is Mode.TRANSITION_EXIT
    deep = state(r_z=-0.5)
    assert dyn.guards(deep, params) == pytest.approx((-0.5, -0.5))
    assert dyn.mode_transition(deep, Mode.WATER, params) is Mode.WATER
    # elevon guard at +0.001 while in TransitionExit
    th = 0.7
    x = state(theta=th)
    x[dyn.RZ] = 0.001 - dyn.guard_psi2(x, params)
    assert dyn.guard_psi2(x, params) == pytest.approx(0.001)
    assert dyn.mode_transition(x, Mode.TRANSITION_EXIT, params) is Mode.AIR


def test_signature_roundtrip():
    for mode in Mode:
        nose_up, tail_up = dyn.SIGNATURE[mode]
        assert dyn.signature_mode(1.0 if nose_up else -1.0, 1.0 if tail_up else -1.0) is mode
    assert dyn.successor(Mode.WATER, 0) is Mode.TRANSITION_EXIT
    assert dyn.successor(Mode.TRANSITION_EXIT, 1) is Mode.AIR
    assert dyn.successor(Mode.AIR, 0) is Mode.TRANSITION_ENTRY
    assert dyn.successor(Mode.TRANSITION_ENTRY, 1) is Mode.WATER


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=7, max_size=7))
def test_reset_map_is_identity(values):
    x = np.array(values)
    np.testing.assert_array_equal(dyn.reset_map(x), x)


def test_reset_map_zero_state():
    np.testing.assert_array_equal(dyn.reset_map(np.zeros(7)), np.zeros(7))


def test_quasi_static_climb_has_two_transitions(params):
    """Rising nose-up from deep water crosses Water -> TransitionExit -> Air."""
    mode = Mode.WATER
    visited = [mode]
    for rz in np.linspace(-2.0, 2.0, 4001):
        x = state(r_z=rz, theta=0.6)
        new = dyn.mode_transition(x, mode, params)
        if new != mode:
            visited.append(new)
            mode = new
    assert visited == [Mode.WATER, Mode.TRANSITION_EXIT, Mode.AIR]


# --------------------------------------------------------------------------
# forces and equations of motion


def test_rest_in_air_is_weight_plus_tiny_buoyancy(params):
    f, m = dyn.forces_moments(state(), np.zeros(2), Mode.AIR, params)
    buoy = params.rho_air * params.displaced_volume * params.gravity
    np.testing.assert_allclose(f, [0.0, -params.mass * params.gravity + buoy], atol=1e-12)
    assert abs(m) == pytest.approx(abs(params.buoyancy_center[0]) * buoy)


def test_submerged_rest_is_hydrostatic(params):
    f, m = dyn.forces_moments(state(r_z=-1.0), np.zeros(2), Mode.WATER, params)
    buoy = params.rho_water * params.displaced_volume * params.gravity
    assert f[0] == pytest.approx(0.0, abs=1e-12)
    assert f[1] == pytest.approx(buoy - params.mass * params.gravity)
    assert m == pytest.approx(params.buoyancy_center[0] * buoy)


@pytest.mark.parametrize("mode", list(Mode))
def test_thrust_superposes_on_body_x(params, mode):
    x = state(r_z=-0.3, theta=0.2, v_x=0.7, v_z=0.1, omega_y=0.3)
    f0, m0 = dyn.forces_moments(x, np.array([0.0, 0.0]), mode, params)
    f1, m1 = dyn.forces_moments(x, np.array([0.0, 1.0]), mode, params)
    np.testing.assert_allclose(f1 - f0, [1.0, 0.0], atol=1e-12)
    assert m1 == pytest.approx(m0)


def test_free_fall_in_air(params):
    xd = dyn.dynamics_f(state(r_z=5.0), np.zeros(2), Mode.AIR, params)
    buoy_acc = params.rho_air * params.displaced_volume * params.gravity / params.mass
    assert xd[dyn.VZ] == pytest.approx(-params.gravity + buoy_acc, rel=1e-12)
    assert abs(xd[dyn.VZ] + params.gravity) < 0.02


def _rk4(x, u, mode, h, params):
    f = dyn.dynamics_f
    k1 = f(x, u, mode, params)
    k2 = f(x + h / 2 * k1, u, mode, params)
    k3 = f(x + h / 2 * k2, u, mode, params)
    k4 = f(x + h * k3, u, mode, params)
    return x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


@pytest.mark.parametrize("mode", [Mode.WATER, Mode.TRANSITION_EXIT])
def test_submerged_momentum_balance(params, mode):
    """Kirchhoff balance: d/dt of world linear momentum equals the world force,
    and d/dt of body angular momentum equals the moment minus the Munk term."""
    x = state(r_z=-0.4, theta=0.3, delta=0.2, v_x=0.8, v_z=-0.15, omega_y=0.4)
    u = np.array([0.1, 0.6])
    mt = dyn.mass_matrix(params, mode)

    def momenta(xs):
        chi = xs[[dyn.VX, dyn.VZ, dyn.OMEGA]]
        p = mt @ chi
        return dyn.rotation(xs[dyn.THETA]) @ p[:2], p[2], p

    h = 1e-6  # the water modes are fast; keep the O(h^2) difference error small
    fwd, bwd = _rk4(x, u, mode, h, params), _rk4(x, u, mode, -h, params)
    dP = (momenta(fwd)[0] - momenta(bwd)[0]) / (2 * h)
    dH = (momenta(fwd)[1] - momenta(bwd)[1]) / (2 * h)
    f, m = dyn.forces_moments(x, u, mode, params)
    _, _, p = momenta(x)
    np.testing.assert_allclose(dP, dyn.rotation(x[dyn.THETA]) @ f, rtol=1e-6, atol=1e-8)
    munk = x[dyn.VX] * p[1] - x[dyn.VZ] * p[0]
    assert dH == pytest.approx(m - munk, rel=1e-6, abs=1e-8)


def test_kinematics_rows(params):
    x = state(theta=0.5, delta=0.1, v_x=2.0, v_z=-0.5, omega_y=0.7)
    xd = dyn.dynamics_f(x, np.array([0.3, 1.0]), Mode.AIR, params)
    np.testing.assert_allclose(xd[:2], dyn.rotation(0.5) @ np.array([2.0, -0.5]))
    assert xd[dyn.THETA] == 0.7
    assert xd[dyn.DELTA] == 0.3


def test_batch_matches_pointwise(params):
    rng = np.random.default_rng(3)
    X = rng.normal(size=(12, 7))
    U = rng.uniform(0, 2, size=(12, 2))
    for mode in Mode:
        batch = dyn.dynamics_batch(X, U, mode, params)
        for i in range(12):
            np.testing.assert_allclose(batch[i], dyn.dynamics_f(X[i], U[i], mode, params), rtol=1e-12)


def test_linearize_reports_non_finite(params):
    with pytest.raises(dyn.LinearizationError):
        dyn.linearize(np.full(7, np.nan), np.zeros(2), Mode.AIR, params)


def test_parameter_validation():
    with pytest.raises(ParameterError):
        VehicleParams(mass=0.0)
    with pytest.raises(ParameterError):
        VehicleParams(cg_offset=0.6)
    bad = [[(1.0, 0.0, 0.0), (0.0, -1.0, 0.0), (0.0, 0.0, 0.0)]] * 4
    with pytest.raises(ParameterError):
        VehicleParams(added_mass=bad)


def test_control_input_rejects_negative_thrust():
    with pytest.raises(ValueError):
        dyn.ControlInput(0.0, -1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-10, 10))
def test_rotation_is_orthonormal(theta):
    R = dyn.rotation(theta)
    np.testing.assert_allclose(R @ R.T, np.eye(2), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
