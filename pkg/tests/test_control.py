import dataclasses
import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from scipy.integrate import solve_ivp

from uaav import dynamics as dyn
from uaav.control import (ControllerState, ControlWeights, GainSchedule, HybridController,
                          RiccatiDivergenceError, TrimError, compute_trim, hybrid_policy, lqr_infinite,
                          riccati_backward, riccati_lti, tvlqr_policy)
from uaav.dynamics import Mode, VehicleParams
from uaav.trajopt import sample

DI_A = np.array([[0.0, 1.0], [0.0, 0.0]])
DI_B = np.array([[0.0], [1.0]])

# --------------------------------------------------------------------------
# Riccati equations on small systems


def test_scalar_integrator_converges_to_unit_cost():
    taus, S, K = riccati_lti([[0.0]], [[1.0]], [[1.0]], [[1.0]], [[0.0]], horizon=20.0, dt=1e-3)
    assert S[0, 0, 0] == pytest.approx(1.0, abs=1e-8)
    assert K[0, 0, 0] == pytest.approx(1.0, abs=1e-8)
    assert taus[0] == 0.0 and taus[-1] == pytest.approx(20.0)


def test_zero_weights_stay_at_zero():
    _, S, K = riccati_lti(DI_A, DI_B, np.zeros((2, 2)), [[1.0]], np.zeros((2, 2)), horizon=5.0, dt=1e-2)
    assert np.all(S == 0.0) and np.all(K == 0.0)


def test_double_integrator_long_horizon_matches_are():
    _, S, _ = riccati_lti(DI_A, DI_B, np.eye(2), [[1.0]], np.zeros((2, 2)), horizon=10.0, dt=1e-3)
    S_are = scipy.linalg.solve_continuous_are(DI_A, DI_B, np.eye(2), np.eye(1))
    np.testing.assert_allclose(S[0], S_are, atol=1e-4)


def test_riccati_samples_are_symmetric_psd():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(4, 4))
    B = rng.normal(size=(4, 2))
    _, S, _ = riccati_lti(A, B, np.eye(4), np.eye(2), np.eye(4), horizon=3.0, dt=1e-3)
    np.testing.assert_array_equal(S, np.swapaxes(S, 1, 2))
    assert np.linalg.eigvalsh(S).min() >= -1e-8


def test_uncontrollable_unstable_system_diverges():
    with pytest.raises(RiccatiDivergenceError):
        riccati_lti([[1.0]], [[0.0]], [[1.0]], [[1.0]], [[0.0]], horizon=30.0, dt=1e-2)
    with pytest.raises(RiccatiDivergenceError):
        lqr_infinite([[1.0]], [[0.0]], [[1.0]], [[1.0]])


def test_weights_must_be_definite():
    with pytest.raises(ValueError):
        riccati_lti([[0.0]], [[1.0]], [[1.0]], [[0.0]], [[0.0]], horizon=1.0, dt=0.1)
    with pytest.raises(ValueError):
        riccati_lti([[0.0]], [[1.0]], [[-1.0]], [[1.0]], [[0.0]], horizon=1.0, dt=0.1)


def test_scalar_unstable_lqr():
    K, S = lqr_infinite([[1.0]], [[1.0]], [[1.0]], [[1.0]])
    assert S[0, 0] == pytest.approx(1.0 + math.sqrt(2.0), abs=1e-8)
    assert K[0, 0] == pytest.approx(1.0 + math.sqrt(2.0), abs=1e-8)


def test_double_integrator_lqr_gain():
    K, S = lqr_infinite(DI_A, DI_B, np.eye(2), [[1.0]])
    np.testing.assert_allclose(K, [[1.0, math.sqrt(3.0)]], atol=1e-8)
    assert np.linalg.eigvals(DI_A - DI_B @ K).real.max() < 0


def test_cost_to_go_decreases_along_closed_loop():
    K, S = lqr_infinite(DI_A, DI_B, np.eye(2), [[1.0]])
    Acl = DI_A - DI_B @ K
    sol = solve_ivp(lambda t, x: Acl @ x, (0.0, 8.0), [0.05, -0.02], t_eval=np.linspace(0, 8, 400),
                    rtol=1e-10, atol=1e-13)
    V = np.einsum("it,ij,jt->t", sol.y, S, sol.y)
    assert np.all(np.diff(V) <= 1e-15)
    assert V[-1] < 1e-3 * V[0]


# --------------------------------------------------------------------------
# trim


def test_zero_gravity_rest_trims_with_zero_input():
    p = VehicleParams(gravity=0.0)
    trim = compute_trim(np.array([0.0, 5.0, 0.3, 0.0, 0.0, 0.0, 0.0]), Mode.AIR, p)
    assert trim.residual <= 1e-9
    np.testing.assert_allclose(trim.u_trim, [0.0, 0.0], atol=1e-8)


def test_air_prop_hang_trim(params):
    x_guard = np.array([0.0, 1.0, math.pi / 4, 0.0, 7.757, -2.059, 0.0])
    trim = compute_trim(x_guard, Mode.AIR, params)
    assert 0.0 < trim.u_trim[1] <= 5.0
    assert trim.residual <= 1e-3
    assert trim.x_trim[dyn.THETA] == pytest.approx(math.pi / 4)
    assert np.hypot(*trim.x_trim[[dyn.VX, dyn.VZ]]) == pytest.approx(np.hypot(7.757, -2.059))
    # independent check: the reduced accelerations vanish at the returned point
    f = dyn.dynamics_f(trim.x_trim, trim.u_trim, Mode.AIR, params)
    assert np.abs(f[[dyn.VX, dyn.VZ, dyn.OMEGA]]).max() <= 1e-3
    assert f[dyn.THETA] == 0.0 and f[dyn.DELTA] == 0.0


def test_trim_ignores_position(params):
    x = np.array([0.0, 1.0, math.pi / 4, 0.0, 7.757, -2.059, 0.0])
    a = compute_trim(x, Mode.AIR, params)
    x2 = x.copy()
    x2[dyn.RX], x2[dyn.RZ] = 40.0, 3.0
    b = compute_trim(x2, Mode.AIR, params)
    np.testing.assert_allclose(a.x_reduced, b.x_reduced, atol=1e-10)
    assert a.residual == pytest.approx(b.residual, abs=1e-12)


def test_hover_beyond_thrust_limit_has_no_trim(params):
    # at 45 degrees and almost no speed the 5 N thrust limit cannot hold the weight
    with pytest.raises(TrimError) as err:
        compute_trim(np.array([0.0, 1.0, math.pi / 4, 0.0, 0.1, 0.0, 0.0]), Mode.AIR, params)
    assert err.value.residual > 1e-6


# --------------------------------------------------------------------------
# gains on the nominal trajectory


@pytest.mark.slow
def test_gain_schedule_structure(traj, gains, params):
    assert gains.schedule == traj.schedule
    for ph, pg in zip(traj.phases, gains.phases):
        assert pg.T == pytest.approx(ph.duration)
        assert pg.taus[0] == 0.0 and pg.taus[-1] == pytest.approx(pg.T)
        assert np.abs(pg.S - np.swapaxes(pg.S, 1, 2)).max() <= 1e-9 * max(1.0, np.abs(pg.S).max())
        assert np.linalg.eigvalsh(pg.S).min() >= -1e-8
        # K = R^-1 B' S at a handful of samples
        for i in np.linspace(0, pg.taus.size - 1, 5).astype(int):
            x0, u0, _ = sample(traj, pg.taus[i], pg.mode)
            _, B = dyn.linearize(x0, u0, pg.mode, params)
            np.testing.assert_allclose(pg.K[i], np.linalg.solve(gains.R, B.T @ pg.S[i]),
                                       rtol=1e-6, atol=1e-6 * np.abs(pg.K[i]).max())
        # guard controller stabilizes the reduced linearization
        A, B = dyn.linearize(pg.trim.x_trim, pg.trim.u_trim, pg.mode, params)
        red = [dyn.THETA, dyn.DELTA, dyn.VX, dyn.VZ, dyn.OMEGA]
        Acl = A[np.ix_(red, red)] - B[red] @ pg.guard_gain[:, red]
        assert np.linalg.eigvals(Acl).real.max() < 0
        assert np.all(pg.guard_gain[:, [dyn.RX, dyn.RZ]] == 0.0)
    # terminal cost of each phase is the next phase's initial cost-to-go
    for a, b in zip(gains.phases, gains.phases[1:]):
        np.testing.assert_allclose(a.S[-1], b.S[0], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(gains.phases[-1].S[-1], gains.Q)


@pytest.mark.slow
def test_gain_csv_roundtrip(tmp_path, gains):
    gains.to_csv(tmp_path / "g.csv")
    back = GainSchedule.from_csv(tmp_path / "g.csv")
    for a, b in zip(gains.phases, back.phases):
        np.testing.assert_array_equal(a.K, b.K)
        np.testing.assert_array_equal(a.S, b.S)
        np.testing.assert_array_equal(a.taus, b.taus)
        np.testing.assert_array_equal(a.guard_gain, b.guard_gain)
    assert back.to_csv_text() == gains.to_csv_text()


@pytest.mark.slow
def test_grid_refinement_changes_initial_gain_little(traj, gains, params):
    for pg in gains.phases:
        S_f = pg.S[-1]
        _, _, K_coarse = riccati_backward(traj, pg.mode, gains.Q, gains.R, S_f, 1e-3, params)
        _, _, K_fine = riccati_backward(traj, pg.mode, gains.Q, gains.R, S_f, 5e-4, params)
        rel = np.linalg.norm(K_fine[0] - K_coarse[0]) / np.linalg.norm(K_coarse[0])
        assert rel < 1e-3, pg.mode


# --------------------------------------------------------------------------
# policies and the automaton


@pytest.mark.slow
def test_tvlqr_on_reference_returns_feedforward(traj, gains):
    for pg in gains.phases:
        for tau in np.linspace(0, pg.T, 7):
            x0, u0, _ = sample(traj, tau, pg.mode)
            np.testing.assert_allclose(tvlqr_policy(tau, x0, pg.mode, gains, traj),
                                       np.clip(u0, gains.u_min, gains.u_max), atol=1e-12)


@pytest.mark.slow
def test_zero_gain_is_open_loop(traj, gains):
    zero = dataclasses.replace(gains, phases=[dataclasses.replace(p, K=np.zeros_like(p.K)) for p in gains.phases])
    x0, u0, _ = sample(traj, 0.3, Mode.WATER)
    np.testing.assert_allclose(tvlqr_policy(0.3, x0 + 0.1, Mode.WATER, zero, traj), u0)


@pytest.mark.slow
@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.lists(st.floats(-20, 20), min_size=7, max_size=7), st.sampled_from([0, 1, 2]), st.floats(0, 1))
def test_outputs_respect_bounds(traj, gains, x, phase, frac):
    pg = gains.phases[phase]
    u = tvlqr_policy(frac * pg.T, np.array(x), pg.mode, gains, traj)
    assert np.all(u >= gains.u_min) and np.all(u <= gains.u_max)
    u, _ = hybrid_policy(ControllerState(pg.mode, True, pg.T), np.array(x), pg.mode, gains, traj)
    assert np.all(u >= gains.u_min) and np.all(u <= gains.u_max)


@pytest.mark.slow
def test_phase_timeout_switches_to_time_invariant(traj, gains):
    T = gains.T(Mode.WATER)
    x0, _, _ = sample(traj, T, Mode.WATER)
    cs = ControllerState(Mode.WATER, False, T - 0.01)
    _, cs = hybrid_policy(cs, x0, Mode.WATER, gains, traj, dt=0.01)
    assert cs.time_invariant and cs.mode is Mode.WATER and cs.tau == T
    _, cs2 = hybrid_policy(cs, x0, Mode.WATER, gains, traj, dt=0.01)
    assert cs2 == cs  # tau frozen


@pytest.mark.slow
@pytest.mark.parametrize("time_invariant", [False, True])
def test_guard_crossing_restarts_tracking_in_successor(traj, gains, time_invariant):
    tau = gains.T(Mode.WATER) if time_invariant else 0.5
    cs = ControllerState(Mode.WATER, time_invariant, tau)
    x0, _, _ = sample(traj, 0.0, Mode.TRANSITION_EXIT)
    events = []
    _, cs = hybrid_policy(cs, x0, Mode.TRANSITION_EXIT, gains, traj, dt=0.01, events=events)
    assert cs.mode is Mode.TRANSITION_EXIT and not cs.time_invariant
    assert cs.tau == pytest.approx(0.01)  # tau restarted at 0, then advanced by one tick
    assert any("TransitionExit" in e for e in events)


@pytest.mark.slow
def test_mode_is_never_skipped(traj, gains):
    cs = ControllerState(Mode.WATER, False, 0.2)
    x0, _, _ = sample(traj, 0.2, Mode.WATER)
    _, cs = hybrid_policy(cs, x0, Mode.AIR, gains, traj)
    assert cs.mode is Mode.WATER and cs.time_invariant


@pytest.mark.slow
def test_regression_holds_earlier_guard_controller(traj, gains):
    cs = ControllerState(Mode.TRANSITION_EXIT, False, 0.1)
    x0, _, _ = sample(traj, 0.1, Mode.TRANSITION_EXIT)
    events = []
    _, cs = hybrid_policy(cs, x0, Mode.WATER, gains, traj, events=events)
    assert cs == ControllerState(Mode.WATER, True, gains.T(Mode.WATER))
    assert any("regression" in e for e in events)


@pytest.mark.slow
def test_without_fallback_a_timed_out_law_outputs_zero(traj, gains):
    ctl = HybridController(gains, traj, fallback=False)
    T = gains.T(Mode.WATER)
    x0, _, _ = sample(traj, T, Mode.WATER)
    u, cs = ctl.step(ControllerState(Mode.WATER, False, T), x0, Mode.WATER)
    assert cs.time_invariant
    np.testing.assert_array_equal(u, 0.0)
    u, cs = ctl.step(cs, x0, Mode.TRANSITION_EXIT)
    np.testing.assert_array_equal(u, 0.0)


@pytest.mark.slow
def test_hold_on_entry_engages_trim_controller(traj, gains):
    x0, _, _ = sample(traj, 0.0, Mode.AIR)
    cs = ControllerState(Mode.TRANSITION_EXIT, False, 0.1)
    u, cs = hybrid_policy(cs, x0, Mode.AIR, gains, traj, hold_on_entry=(Mode.AIR,))
    assert cs == ControllerState(Mode.AIR, True, gains.T(Mode.AIR))
    assert np.all(u >= gains.u_min) and np.all(u <= gains.u_max)


def test_weights_accept_diagonals_and_matrices():
    w = ControlWeights(Q=np.eye(7).tolist(), R=(1.0, 2.0))
    assert w.Qm.shape == (7, 7) and w.Rm[1, 1] == 2.0
    with pytest.raises(ValueError):
        ControlWeights(Q=(1.0, 2.0)).Qm
