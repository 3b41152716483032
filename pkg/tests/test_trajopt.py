import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uaav import dynamics as dyn
from uaav.dynamics import Mode
from uaav.sqp import SolverError, SolverOptions
from uaav.trajopt import (DEFAULT_DELTA_FINAL, DEFAULT_X_FINAL, CollocationNLP, DynamicsEvaluationError,
                          ModeSchedule, NominalTrajectory, PhaseDef, ProblemValidationError,
                          TrajectoryFormatError, TrajOptProblem, build_problem, hermite_simpson_defect,
                          hs_defect, hs_midpoint, initial_guess, sample, solve, stage_cost)

# --------------------------------------------------------------------------
# collocation primitives


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.floats(0.01, 1.0))
def test_constant_dynamics_defect_vanishes_on_exact_step(c, h):
    c = np.array(c)
    x0 = np.array([0.3, -1.0, 2.0])
    d = hs_defect(lambda x, u: c, x0, x0 + c * h, np.zeros(1), np.zeros(1), h)
    np.testing.assert_allclose(d, 0.0, atol=1e-12)


def test_constant_dynamics_mismatched_endpoints():
    c = np.array([1.5, -2.0])
    x0 = np.array([0.2, 0.4])
    d = hs_defect(lambda x, u: c, x0, x0, np.zeros(1), np.zeros(1), 0.3)
    np.testing.assert_allclose(d, c * 0.3, rtol=0, atol=1e-15)


def test_exponential_defect_is_fifth_order_small():
    h = 0.1
    d = hs_defect(lambda x, u: x, np.array([1.0]), np.array([math.exp(h)]), np.zeros(1), np.zeros(1), h)
    assert abs(d[0]) <= 1e-7


def test_exponential_defect_scales_as_h5():
    errs = []
    for h in (0.2, 0.1, 0.05):
        d = hs_defect(lambda x, u: x, np.array([1.0]), np.array([math.exp(h)]), np.zeros(1), np.zeros(1), h)
        errs.append(abs(d[0]))
    slopes = np.diff(np.log(errs)) / np.diff(np.log([0.2, 0.1, 0.05]))
    np.testing.assert_allclose(slopes, 5.0, atol=0.1)


def test_midpoint_control_is_average():
    seen = []

    def f(x, u):
        seen.append(np.array(u))
        return np.zeros(1)

    hs_defect(f, np.zeros(1), np.zeros(1), np.array([1.0]), np.array([3.0]), 0.1)
    np.testing.assert_allclose(seen[-1], [2.0])


def test_non_finite_dynamics_names_the_knot(params):
    x = np.full(7, np.nan)
    with pytest.raises(DynamicsEvaluationError, match="knot 4"):
        hermite_simpson_defect(x, x, np.zeros(2), np.zeros(2), 0.1, Mode.AIR, params, index=4)


def test_step_must_be_positive():
    with pytest.raises(ValueError):
        hs_defect(lambda x, u: x, np.ones(1), np.ones(1), np.zeros(1), np.zeros(1), 0.0)


def test_stage_cost_examples():
    assert stage_cost(np.zeros(2), 0.1, np.eye(2), 1.0) == pytest.approx(0.1)
    assert stage_cost(np.array([1.0, 2.0]), 1.0, np.eye(2), 1.0) == pytest.approx(6.0)


def test_zero_control_cost_is_pure_time(params):
    phases = []
    t0 = 0.0
    for mode, n, h in ((Mode.WATER, 5, 0.1), (Mode.TRANSITION_EXIT, 3, 0.05)):
        X = np.zeros((n + 1, 7))
        U = np.zeros((n + 1, 2))
        from uaav.trajopt import PhaseTrajectory
        phases.append(PhaseTrajectory(mode, t0, h, X, U, dyn.dynamics_batch(X, U, mode, params)))
        t0 += n * h
    traj = NominalTrajectory(phases)
    assert traj.cost(np.eye(2), 2.0) == pytest.approx(2.0 * (5 * 0.1 + 3 * 0.05))


# --------------------------------------------------------------------------
# problem construction


def test_single_water_phase_dimensions(params):
    prob = TrajOptProblem(schedule=ModeSchedule(phases=(Mode.WATER,), knots=(10,)),
                          x_final=(-2.0, -0.5, 0, 0, 1, 0, 0), delta_final=(1, 0.2, 0.3, 1.5, 1, 1, 5))
    nlp = build_problem(prob, params)
    assert nlp.n == 11 * 7 + 11 * 2 + 1 == 100
    assert nlp.m_eq == 10 * 7


def test_water_exit_has_one_guard_equality_per_boundary(params):
    nlp = build_problem(TrajOptProblem(), params)
    assert len(nlp.boundary_guards) == 2
    assert nlp.m_eq == (20 + 8 + 20) * 7 + 2


def test_straight_line_guess_gives_finite_constraints(params):
    prob = TrajOptProblem()
    nlp = build_problem(prob, params)
    z = initial_guess(nlp, prob)
    c_eq, c_in = nlp.constraints(z)[:2]
    assert np.all(np.isfinite(c_eq)) and np.all(np.isfinite(c_in))
    assert np.isfinite(nlp.objective(z)[0] if isinstance(nlp.objective(z), tuple) else nlp.objective(z))


def test_inconsistent_boxes_list_every_component():
    with pytest.raises(ProblemValidationError) as err:
        TrajOptProblem(x_min=(1.0,) * 7, x_max=(0.0,) * 7, h_min=0.5, h_max=0.1)
    msg = str(err.value)
    assert "x bounds[0]" in msg and "x bounds[6]" in msg and "h bounds" in msg


def test_schedule_must_follow_guards():
    with pytest.raises(ProblemValidationError):
        ModeSchedule(phases=(Mode.WATER, Mode.AIR), knots=(5, 5))
    with pytest.raises(ProblemValidationError):
        ModeSchedule(phases=(Mode.WATER,), knots=(0,))


def test_problem_defaults():
    prob = TrajOptProblem()
    assert prob.x_init == (-3.5, -1.0, 0.0, 0.0, 0.5, 0.0, 0.0)
    assert prob.x_final == DEFAULT_X_FINAL == (0.0, 1.0, 0.0, 0.0, 10.0, 0.0, 0.0)
    assert prob.delta_final == pytest.approx(DEFAULT_DELTA_FINAL)
    assert prob.delta_final[3] == pytest.approx(math.pi / 2)
    assert prob.schedule.phases == (Mode.WATER, Mode.TRANSITION_EXIT, Mode.AIR)
    assert prob.D == 1.0 and prob.R == ((1.0, 0.0), (0.0, 1.0))


# --------------------------------------------------------------------------
# solver on a problem with a closed-form answer


def _di_nlp(n=100, u_lim=6.0, T=1.0):
    def f(X, U):
        return np.stack([X[:, 1], U[:, 0]], axis=1)

    def jac(X, U):
        m = X.shape[0]
        A = np.zeros((m, 2, 2))
        A[:, 0, 1] = 1.0
        B = np.zeros((m, 2, 1))
        B[:, 1, 0] = 1.0
        return A, B

    h = T / n
    return CollocationNLP(2, 1, [PhaseDef(n, f, jac)], [[1.0]], 0.0, [-10, -10], [10, 10], [-u_lim], [u_lim],
                          h, h, [0, 0], [0, 0], [1, 0], [1, 0])


def test_double_integrator_min_effort_matches_closed_form():
    # rest-to-rest over unit distance in unit time: u = 6 - 12 t, cost 12
    nlp = _di_nlp()
    traj = solve(nlp, nlp.pack(np.zeros((101, 2)), np.zeros((101, 1)), [0.01]), SolverOptions())
    assert traj.info["cost"] == pytest.approx(12.0, rel=0.01)
    assert traj.info["max_violation"] <= 1e-6
    t = np.arange(101) * 0.01
    np.testing.assert_allclose(traj.phases[0].X[:, 0], 3 * t ** 2 - 2 * t ** 3, atol=1e-2)


def test_warm_start_at_optimum_is_a_fixed_point():
    nlp = _di_nlp()
    z0 = nlp.pack(np.zeros((101, 2)), np.zeros((101, 1)), [0.01])
    first = solve(nlp, z0, SolverOptions())
    X, U = first.phases[0].X, first.phases[0].U
    again = solve(nlp, nlp.pack(X, U, [first.phases[0].h]), SolverOptions())
    assert again.info["iterations"] <= 3
    assert again.info["cost"] == pytest.approx(first.info["cost"], abs=1e-8)


def test_merit_is_monotone_over_accepted_iterates():
    from uaav.sqp import solve_sqp
    nlp = _di_nlp(n=40)
    res = solve_sqp(nlp, nlp.pack(np.zeros((41, 2)), np.zeros((41, 1)), [1 / 40]), SolverOptions())
    m = np.asarray(res.merit_history)
    assert m.size >= 2
    assert np.all(np.diff(m) <= 1e-9 * np.maximum(1.0, np.abs(m[:-1])))


def test_infeasible_problem_reports_worst_constraint():
    nlp = _di_nlp(n=20, u_lim=0.1)
    with pytest.raises(SolverError) as err:
        solve(nlp, nlp.pack(np.zeros((21, 2)), np.zeros((21, 1)), [0.05]), SolverOptions(max_iter=30))
    assert err.value.worst_constraint
    assert err.value.violation > 1e-6


def test_guess_dimension_is_checked():
    nlp = _di_nlp(n=10)
    with pytest.raises(ValueError):
        solve(nlp, np.zeros(3))


# --------------------------------------------------------------------------
# sampling and serialization


def _toy_traj(params):
    from uaav.trajopt import PhaseTrajectory
    rng = np.random.default_rng(0)
    X = np.cumsum(rng.normal(size=(6, 7)) * 0.05, axis=0)
    X[:, dyn.RZ] -= 1.0
    U = np.abs(rng.normal(size=(6, 2)))
    ph = PhaseTrajectory(Mode.WATER, 0.0, 0.1, X, U, dyn.dynamics_batch(X, U, Mode.WATER, params))
    return NominalTrajectory([ph])


def test_sample_hits_knots_exactly(params):
    traj = _toy_traj(params)
    ph = traj.phases[0]
    for k in range(ph.n + 1):
        x, u, clamped = sample(traj, k * ph.h, Mode.WATER)
        np.testing.assert_array_equal(x, ph.X[k])
        np.testing.assert_array_equal(u, ph.U[k])
        assert not clamped


def test_sample_midpoint_is_collocation_midpoint(params):
    traj = _toy_traj(params)
    ph = traj.phases[0]
    for k in range(ph.n):
        x, u, _ = sample(traj, (k + 0.5) * ph.h, Mode.WATER)
        xc = hs_midpoint(ph.X[k], ph.X[k + 1], ph.F[k], ph.F[k + 1], ph.h)
        np.testing.assert_allclose(x, xc, atol=1e-12)
        np.testing.assert_allclose(u, 0.5 * (ph.U[k] + ph.U[k + 1]), atol=1e-12)


def test_sample_clamps_and_flags(params):
    traj = _toy_traj(params)
    ph = traj.phases[0]
    x, _, clamped = sample(traj, -1.0, Mode.WATER)
    assert clamped
    np.testing.assert_array_equal(x, ph.X[0])
    x, _, clamped = sample(traj, 99.0, Mode.WATER)
    assert clamped
    np.testing.assert_array_equal(x, ph.X[-1])


def test_csv_roundtrip_is_exact(tmp_path, params):
    traj = _toy_traj(params)
    path = tmp_path / "t.csv"
    traj.to_csv(path)
    back = NominalTrajectory.from_csv(path, params)
    np.testing.assert_array_equal(back.phases[0].X, traj.phases[0].X)
    np.testing.assert_array_equal(back.phases[0].U, traj.phases[0].U)
    assert back.phases[0].h == traj.phases[0].h
    assert back.to_csv_text() == traj.to_csv_text()


def test_discontinuous_phases_are_rejected(tmp_path, pipeline, params):
    lines = pipeline["traj"].read_text().splitlines()
    out = []
    for line in lines:
        if not line.startswith("#") and line.startswith("1,0,"):
            cells = line.split(",")
            cells[4] = repr(float(cells[4]) + 0.05)  # r_z of the first TransitionExit knot
            line = ",".join(cells)
        out.append(line)
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(out) + "\n")
    with pytest.raises(TrajectoryFormatError, match="discontinuity"):
        NominalTrajectory.from_csv(bad, params)


# --------------------------------------------------------------------------
# the water-exit solution


@pytest.mark.slow
def test_water_exit_solution_properties(traj, params):
    prob = TrajOptProblem()
    assert traj.schedule == (Mode.WATER, Mode.TRANSITION_EXIT, Mode.AIR)
    assert traj.info["max_violation"] <= 1e-6
    xf = traj.phases[-1].X[-1]
    assert 0.5 <= xf[dyn.RZ] <= 1.5
    assert 8.0 <= xf[dyn.VX] <= 12.0
    assert np.all(np.abs(xf - np.asarray(prob.x_final)) <= np.asarray(prob.delta_final) + 1e-9)
    x0 = traj.phases[0].X[0]
    assert np.all(np.abs(x0 - np.asarray(prob.x_init)) <= np.asarray(prob.delta_init) + 1e-9)
    for ph in traj.phases:
        assert prob.h_min - 1e-12 <= ph.h <= prob.h_max + 1e-12
        assert np.all(ph.U >= np.asarray(prob.u_min) - 1e-9) and np.all(ph.U <= np.asarray(prob.u_max) + 1e-9)
        for k in range(ph.n):
            d = hermite_simpson_defect(ph.X[k], ph.X[k + 1], ph.U[k], ph.U[k + 1], ph.h, ph.mode, params, k)
            assert np.abs(d).max() <= 2e-6
        # containment: guard signs match the phase signature at every knot
        for k, x in enumerate(ph.X):
            g = dyn.guard_stack(ph.mode, *dyn.guards(x, params))
            allowed = 1e-6
            if k == ph.n and ph is not traj.phases[-1]:
                allowed = 1e-5  # the exit knot sits on the boundary guard
            if k == 0 and ph is not traj.phases[0]:
                allowed = 1e-5
            assert max(g) <= allowed
    # guard equality at each boundary
    for ph, which in ((traj.phases[0], 0), (traj.phases[1], 1)):
        assert abs(dyn.guards(ph.X[-1], params)[which]) <= 1e-6


@pytest.mark.slow
def test_doubling_knots_changes_cost_by_under_two_percent(traj, params):
    from uaav.trajopt import optimize_water_exit
    fine = optimize_water_exit(TrajOptProblem(schedule=ModeSchedule(knots=(40, 16, 40))), params,
                               SolverOptions(time_limit=900.0))
    assert fine.info["max_violation"] <= 1e-6
    assert abs(fine.info["cost"] - traj.info["cost"]) / traj.info["cost"] < 0.02
