"""Trajectory-tracking feedback for the hybrid vehicle.

Each phase of the nominal trajectory gets a time-varying LQR (TVLQR) from a
backward Riccati sweep along the linearized dynamics.  At the end of a phase a
time-invariant LQR about a trim condition takes over and keeps pushing the
vehicle toward the next guard.  :class:`HybridController` is the automaton
that switches between the two.

Feedback enters with the stabilizing sign, ``u = u0 - K (x - x0)`` with
``K = R^-1 B' S``.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import yaml
from scipy.integrate import solve_ivp
from scipy.optimize import least_squares

from . import dynamics as dyn
from .dynamics import NU, NX, Mode, VehicleParams
from .trajopt import NominalTrajectory, sample

log = logging.getLogger(__name__)

# indices of the position-free (reduced) state
REDUCED = np.array([dyn.THETA, dyn.DELTA, dyn.VX, dyn.VZ, dyn.OMEGA])

DEFAULT_Q = (10.0, 10.0, 50.0, 1.0, 1.0, 1.0, 5.0)
DEFAULT_R = (0.1, 0.01)
U_MIN = np.array([-10.0, 0.0])
U_MAX = np.array([10.0, 5.0])


class RiccatiDivergenceError(RuntimeError):
    """The Riccati solution blew up; the linearization is not stabilizable."""

    def __init__(self, message: str, mode: Mode | None = None):
        super().__init__(message)
        self.mode = mode


class TrimError(RuntimeError):
    """No trim condition with an acceptable residual was found."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class ControlWeights:
    Q: tuple = DEFAULT_Q
    R: tuple = DEFAULT_R
    grid_dt: float = 1e-3
    air_trim_pitch: float = math.pi / 4
    air_trim_speed: float | None = None  # m/s; None keeps the speed at the end of the trajectory
    trim_tol: float = 1e-6

    @property
    def Qm(self) -> np.ndarray:
        return _as_matrix(self.Q, NX)

    @property
    def Rm(self) -> np.ndarray:
        return _as_matrix(self.R, NU)


def _as_matrix(v, n) -> np.ndarray:
    a = np.asarray(v, dtype=float)
    if a.ndim == 1:
        a = np.diag(a)
    if a.shape != (n, n):
        raise ValueError(f"expected {n} weights or an {n}x{n} matrix, got shape {a.shape}")
    return a


# --------------------------------------------------------------------------
# Riccati sweeps


def riccati_rhs(S, A, B, Q, Rinv):
    """dS/d(backward time) = A'S + SA - S B R^-1 B' S + Q."""
    SB = S @ B
    return A.T @ S + S @ A - SB @ Rinv @ SB.T + Q


def _check_psd_inputs(Q, R, S_f):
    if np.linalg.eigvalsh(0.5 * (Q + Q.T)).min() < -1e-12:
        raise ValueError("Q must be positive semidefinite")
    if np.linalg.eigvalsh(0.5 * (R + R.T)).min() <= 0:
        raise ValueError("R must be positive definite")
    if np.linalg.eigvalsh(0.5 * (S_f + S_f.T)).min() < -1e-12:
        raise ValueError("S_f must be positive semidefinite")


def riccati_sweep(A_nodes, B_nodes, A_mid, B_mid, Q, R, S_f, dt, mode=None, limit=1e9):
    """Fixed-step RK4 backward sweep on a uniform grid.

    ``A_nodes[i]`` is the linearization at grid time ``tau_i`` and ``A_mid[i]``
    at ``tau_i + dt/2``.  Returns ``S`` with ``S[-1] = S_f``; the solution is
    resymmetrized after every step.
    """
    Q = np.asarray(Q, float)
    R = np.asarray(R, float)
    S_f = np.asarray(S_f, float)
    _check_psd_inputs(Q, R, S_f)
    Rinv = np.linalg.inv(R)
    N = len(A_nodes) - 1
    n = Q.shape[0]
    S = np.empty((N + 1, n, n))
    S[N] = 0.5 * (S_f + S_f.T)
    for i in range(N, 0, -1):
        Si = S[i]
        k1 = riccati_rhs(Si, A_nodes[i], B_nodes[i], Q, Rinv)
        k2 = riccati_rhs(Si + 0.5 * dt * k1, A_mid[i - 1], B_mid[i - 1], Q, Rinv)
        k3 = riccati_rhs(Si + 0.5 * dt * k2, A_mid[i - 1], B_mid[i - 1], Q, Rinv)
        k4 = riccati_rhs(Si + dt * k3, A_nodes[i - 1], B_nodes[i - 1], Q, Rinv)
        Sn = Si + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        Sn = 0.5 * (Sn + Sn.T)
        if not np.all(np.isfinite(Sn)) or np.abs(Sn).max() > limit:
            where = f" in {mode.label}" if mode is not None else ""
            raise RiccatiDivergenceError(
                f"Riccati solution diverged{where} at grid index {i - 1} (|S| > {limit:g}); "
                "the linearization looks uncontrollable", mode)
        S[i - 1] = Sn
    return S


def gains_from_S(S, B, R):
    """K = R^-1 B' S for stacked S and B."""
    return np.linalg.solve(np.asarray(R, float), np.swapaxes(B, -1, -2) @ S)


def riccati_lti(A, B, Q, R, S_f, horizon: float, dt: float):
    """Backward sweep for a time-invariant system; returns ``(taus, S, K)``."""
    A = np.atleast_2d(np.asarray(A, float))
    B = np.atleast_2d(np.asarray(B, float))
    N = max(1, int(math.ceil(horizon / dt - 1e-9)))
    dt = horizon / N
    An = np.broadcast_to(A, (N + 1,) + A.shape)
    Bn = np.broadcast_to(B, (N + 1,) + B.shape)
    S = riccati_sweep(An, Bn, An[:N], Bn[:N], np.atleast_2d(Q), np.atleast_2d(R), np.atleast_2d(S_f), dt)
    K = gains_from_S(S, Bn, np.atleast_2d(R))
    return np.linspace(0.0, horizon, N + 1), S, K


def _phase_grid(T: float, grid_dt: float):
    N = max(1, int(math.ceil(T / grid_dt - 1e-9)))
    return np.linspace(0.0, T, N + 1), T / N


def riccati_backward(traj: NominalTrajectory, mode: Mode, Q, R, S_f, grid_dt: float,
                     params: VehicleParams):
    """TVLQR sweep along one phase of ``traj``; returns ``(taus, S, K)``."""
    T = traj.phase(mode).duration
    taus, dt = _phase_grid(T, grid_dt)
    mids = taus[:-1] + 0.5 * dt
    pts = np.concatenate([taus, mids])
    X = np.empty((pts.size, NX))
    U = np.empty((pts.size, NU))
    for i, t in enumerate(pts):
        X[i], U[i], _ = sample(traj, t, mode)
    A, B = dyn.linearize_batch(X, U, mode, params)
    n = taus.size
    S = riccati_sweep(A[:n], B[:n], A[n:], B[n:], Q, R, S_f, dt, mode=mode)
    K = gains_from_S(S, B[:n], R)
    return taus, S, K


def lqr_infinite(A, B, Q, R, tol: float = 1e-9, t_limit: float = 1e4):
    """Infinite-horizon LQR gain by integrating the Riccati equation to rest.

    The backward Riccati flow is integrated with a stiff solver over doubling
    horizons until ``|dS/dt| < tol``.  Returns ``(K, S)``.
    """
    A = np.atleast_2d(np.asarray(A, float))
    B = np.atleast_2d(np.asarray(B, float))
    Q = np.atleast_2d(np.asarray(Q, float))
    R = np.atleast_2d(np.asarray(R, float))
    n = A.shape[0]
    _check_psd_inputs(Q, R, np.zeros((n, n)))
    Rinv = np.linalg.inv(R)

    def rhs(_t, s):
        S = s.reshape(n, n)
        return riccati_rhs(0.5 * (S + S.T), A, B, Q, Rinv).ravel()

    def jac(_t, s):
        # d vec(F)/d vec(S) for F = A'S + SA - S M S,  M = B R^-1 B'
        S = s.reshape(n, n)
        M = B @ Rinv @ B.T
        Acl = A - M @ S
        eye = np.eye(n)
        return np.kron(Acl.T, eye) + np.kron(eye, Acl.T)

    s = np.zeros(n * n)
    t, span = 0.0, 1.0
    while t < t_limit:
        sol = solve_ivp(rhs, (0.0, span), s, method="Radau", jac=jac, rtol=1e-11, atol=1e-13)
        if not sol.success:
            raise RiccatiDivergenceError(f"Riccati integration failed: {sol.message}")
        s = sol.y[:, -1]
        t += span
        S = s.reshape(n, n)
        S = 0.5 * (S + S.T)
        if not np.all(np.isfinite(S)) or np.abs(S).max() > 1e9:
            raise RiccatiDivergenceError("Riccati solution diverged; (A, B) is not stabilizable")
        if np.abs(riccati_rhs(S, A, B, Q, Rinv)).max() < tol:
            return Rinv @ B.T @ S, S
        span *= 2.0
    raise RiccatiDivergenceError(f"Riccati equation did not settle within {t_limit:g} s; "
                                 "(A, B) is probably not stabilizable")


# --------------------------------------------------------------------------
# trim


@dataclass
class TrimCondition:
    mode: Mode
    x_trim: np.ndarray
    u_trim: np.ndarray
    residual: float

    @property
    def x_reduced(self) -> np.ndarray:
        return self.x_trim[REDUCED]


def _trim_position(mode: Mode, params: VehicleParams) -> tuple[float, float]:
    """A position consistent with the mode's guard signature (only used to
    evaluate the dynamics, which do not depend on position)."""
    return 0.0, {Mode.WATER: -5.0, Mode.AIR: 5.0}.get(mode, 0.0)


def compute_trim(x_guard, mode: Mode, params: VehicleParams, tol: float = 1e-6,
                 u_min=U_MIN, u_max=U_MAX) -> TrimCondition:
    """Trim at the guard's pitch and speed.

    Unknowns are the direction of the body velocity, the elevon angle and the
    thrust; pitch rate and elevon rate are zero.  Positions are carried over
    from ``x_guard`` but play no role.
    """
    xg = np.asarray(x_guard, float)
    theta = float(xg[dyn.THETA])
    speed = float(np.hypot(xg[dyn.VX], xg[dyn.VZ]))
    t_lo, t_hi = float(u_min[1]), float(u_max[1])

    def state(z):
        a, d, _ = z
        x = xg.copy()
        x[dyn.DELTA] = d
        x[dyn.VX] = speed * math.cos(a)
        x[dyn.VZ] = speed * math.sin(a)
        x[dyn.OMEGA] = 0.0
        return x

    def residual(z):
        x = state(z)
        f = dyn.dynamics_f(x, np.array([0.0, z[2]]), mode, params)
        return f[[dyn.VX, dyn.VZ, dyn.OMEGA]]

    a_guard = math.atan2(xg[dyn.VZ], xg[dyn.VX]) if speed > 0 else 0.0
    d_guard = float(np.clip(xg[dyn.DELTA], -1.5, 1.5))
    starts = [(a_guard, d_guard, 0.5 * (t_lo + t_hi))]
    for a0 in np.linspace(-1.2, 1.2, 7):
        for t0 in (0.1, 0.5, 0.9):
            starts.append((a0, 0.0, t_lo + t0 * (t_hi - t_lo)))
    lb = [-math.pi, -math.pi / 2, t_lo]
    ub = [math.pi, math.pi / 2, t_hi]
    best = None
    for z0 in starts:
        z0 = np.clip(z0, lb, ub)
        r = least_squares(residual, z0, bounds=(lb, ub), xtol=1e-14, ftol=1e-14, gtol=1e-14)
        if best is None or r.cost < best.cost:
            best = r
        if best.cost < 0.5 * (0.01 * tol) ** 2:
            break
    res = float(np.linalg.norm(residual(best.x)))
    if res > tol:
        raise TrimError(f"no trim in {mode.label} at pitch {theta:.3f} rad, speed {speed:.3f} m/s "
                        f"(residual {res:.3e})", res)
    return TrimCondition(mode=mode, x_trim=state(best.x), u_trim=np.array([0.0, best.x[2]]), residual=res)


# --------------------------------------------------------------------------
# gain schedule


@dataclass
class PhaseGains:
    mode: Mode
    T: float
    taus: np.ndarray
    K: np.ndarray  # (N+1, 2, 7)
    S: np.ndarray  # (N+1, 7, 7)
    guard_gain: np.ndarray  # (2, 7), zero on the position columns
    trim: TrimCondition

    def K_at(self, tau: float) -> np.ndarray:
        tau = min(max(tau, 0.0), self.T)
        i = int(np.searchsorted(self.taus, tau, side="right")) - 1
        i = min(max(i, 0), self.taus.size - 2)
        w = (tau - self.taus[i]) / (self.taus[i + 1] - self.taus[i])
        return (1 - w) * self.K[i] + w * self.K[i + 1]


@dataclass
class GainSchedule:
    phases: list
    Q: np.ndarray
    R: np.ndarray
    u_min: np.ndarray = field(default_factory=lambda: U_MIN.copy())
    u_max: np.ndarray = field(default_factory=lambda: U_MAX.copy())

    @property
    def schedule(self) -> tuple:
        return tuple(p.mode for p in self.phases)

    def phase(self, mode: Mode) -> PhaseGains:
        for p in self.phases:
            if p.mode == mode:
                return p
        raise KeyError(f"no gains for mode {mode.label}")

    def T(self, mode: Mode) -> float:
        return self.phase(mode).T

    # -- serialization
    def to_csv_text(self, metadata: dict | None = None) -> str:
        meta = {"format": "uaav-gains", "version": 1,
                "Q": self.Q.tolist(), "R": self.R.tolist(),
                "u_min": self.u_min.tolist(), "u_max": self.u_max.tolist(), "phases": []}
        for p in self.phases:
            meta["phases"].append({
                "mode": p.mode.label, "T": float(p.T), "samples": int(p.taus.size),
                "guard_gain": p.guard_gain.tolist(),
                "x_trim": p.trim.x_trim.tolist(), "u_trim": p.trim.u_trim.tolist(),
                "trim_residual": float(p.trim.residual),
            })
        if metadata:
            meta.update(metadata)
        buf = io.StringIO()
        for line in yaml.safe_dump(meta, sort_keys=True).splitlines():
            buf.write(f"# {line}\n")
        kcols = [f"K{i}{j}" for i in range(NU) for j in range(NX)]
        iu = np.triu_indices(NX)
        scols = [f"S{i}{j}" for i, j in zip(*iu)]
        buf.write(",".join(["mode", "tau"] + kcols + scols) + "\n")
        for p in self.phases:
            for t, K, S in zip(p.taus, p.K, p.S):
                vals = [repr(float(t))] + [repr(float(v)) for v in K.ravel()] + [repr(float(v)) for v in S[iu]]
                buf.write(p.mode.label + "," + ",".join(vals) + "\n")
        return buf.getvalue()

    def to_csv(self, path, metadata: dict | None = None) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv_text(metadata))

    @classmethod
    def from_csv(cls, path) -> "GainSchedule":
        with open(path) as fh:
            lines = fh.read().splitlines()
        header = [ln[2:] for ln in lines if ln.startswith("# ")]
        meta = yaml.safe_load("\n".join(header))
        if not isinstance(meta, dict) or meta.get("format") != "uaav-gains":
            raise ValueError(f"{path}: not a gain schedule file")
        body = [ln for ln in lines if ln and not ln.startswith("#")]
        rows = [ln.split(",") for ln in body[1:]]
        iu = np.triu_indices(NX)
        phases = []
        for pm in meta["phases"]:
            mode = Mode.parse(pm["mode"])
            sel = [r for r in rows if r[0] == mode.label]
            data = np.array([[float(v) for v in r[1:]] for r in sel])
            if data.shape[0] != pm["samples"]:
                raise ValueError(f"{path}: expected {pm['samples']} samples for {mode.label}, got {data.shape[0]}")
            taus = data[:, 0]
            K = data[:, 1:1 + NU * NX].reshape(-1, NU, NX)
            S = np.zeros((data.shape[0], NX, NX))
            S[:, iu[0], iu[1]] = data[:, 1 + NU * NX:]
            S = S + np.swapaxes(S, 1, 2) - S * np.eye(NX)
            trim = TrimCondition(mode, np.array(pm["x_trim"]), np.array(pm["u_trim"]), pm["trim_residual"])
            phases.append(PhaseGains(mode, pm["T"], taus, K, S, np.array(pm["guard_gain"]), trim))
        return cls(phases=phases, Q=np.array(meta["Q"]), R=np.array(meta["R"]),
                   u_min=np.array(meta["u_min"]), u_max=np.array(meta["u_max"]))


def guard_controller(trim: TrimCondition, params: VehicleParams, Q, R) -> np.ndarray:
    """Time-invariant LQR on the reduced state about ``trim``; returns a 2x7 gain."""
    A, B = dyn.linearize(trim.x_trim, trim.u_trim, trim.mode, params)
    Ar = A[np.ix_(REDUCED, REDUCED)]
    Br = B[REDUCED]
    Qr = np.asarray(Q, float)[np.ix_(REDUCED, REDUCED)]
    Kr, _ = lqr_infinite(Ar, Br, Qr, R)
    K = np.zeros((NU, NX))
    K[:, REDUCED] = Kr
    return K


def synthesize(traj: NominalTrajectory, params: VehicleParams,
               weights: ControlWeights | None = None,
               u_min=U_MIN, u_max=U_MAX) -> GainSchedule:
    """TVLQR gains for every phase plus the guard controllers.

    Phases are processed last to first; each phase's terminal cost is the
    next phase's initial cost-to-go (the reset map is the identity), and the
    last phase ends with ``S_f = Q``.
    """
    w = weights or ControlWeights()
    Q, R = w.Qm, w.Rm
    out = []
    S_f = Q
    for ph in reversed(traj.phases):
        mode = ph.mode
        taus, S, K = riccati_backward(traj, mode, Q, R, S_f, w.grid_dt, params)
        x_guard = ph.X[-1].copy()
        if mode == Mode.AIR:
            x_guard[dyn.THETA] = w.air_trim_pitch
            if w.air_trim_speed is not None:
                v = x_guard[[dyn.VX, dyn.VZ]]
                x_guard[[dyn.VX, dyn.VZ]] = v * (w.air_trim_speed / max(float(np.hypot(*v)), 1e-9))
        trim = compute_trim(x_guard, mode, params, tol=w.trim_tol, u_min=u_min, u_max=u_max)
        Kg = guard_controller(trim, params, Q, R)
        out.append(PhaseGains(mode, ph.duration, taus, K, S, Kg, trim))
        S_f = S[0]
    out.reverse()
    return GainSchedule(phases=out, Q=Q, R=R, u_min=np.asarray(u_min, float), u_max=np.asarray(u_max, float))


# --------------------------------------------------------------------------
# policies and the controller automaton


def state_error(x, x_ref) -> np.ndarray:
    e = np.asarray(x, float) - np.asarray(x_ref, float)
    e[dyn.THETA] = dyn.wrap_angle(e[dyn.THETA])
    return e


def saturate(u, gains: GainSchedule) -> np.ndarray:
    return np.clip(u, gains.u_min, gains.u_max)


def tvlqr_policy(tau: float, x, mode: Mode, gains: GainSchedule, traj: NominalTrajectory) -> np.ndarray:
    """``u0(tau) - K(tau) (x - x0(tau))``, saturated to the control bounds."""
    x0, u0, _ = sample(traj, tau, mode)
    K = gains.phase(mode).K_at(tau)
    u = u0 - K @ state_error(x, x0)
    us = saturate(u, gains)
    if not np.array_equal(u, us):
        log.debug("TVLQR output saturated in %s at tau=%.3f", mode.label, tau)
    return us


def guard_policy(x, mode: Mode, gains: GainSchedule) -> np.ndarray:
    """Time-invariant law ``u_trim - K_ti (x - x_trim)`` on the reduced state."""
    p = gains.phase(mode)
    u = p.trim.u_trim - p.guard_gain @ state_error(x, p.trim.x_trim)
    return saturate(u, gains)


@dataclass(frozen=True)
class ControllerState:
    mode: Mode
    time_invariant: bool = False
    tau: float = 0.0

    @property
    def label(self) -> str:
        kind = "TimeInvariant" if self.time_invariant else "TimeVarying"
        return f"{kind}({self.mode.label})"


@dataclass
class HybridController:
    """Controller automaton advanced once per control tick.

    ``fallback=False`` models a controller without the time-invariant stage:
    once a phase's time runs out the control law terminates and outputs zero
    elevon rate and zero thrust for the rest of the run.  Trim controllers
    engaged on entry (``hold_on_entry``) are not affected.
    """

    gains: GainSchedule
    traj: NominalTrajectory
    dt: float = 0.01
    fallback: bool = True
    events: list = field(default_factory=list)
    hold_on_entry: tuple = ()

    def initial_state(self) -> ControllerState:
        return ControllerState(mode=self.gains.schedule[0])

    def step(self, cs: ControllerState, x_est, q_est: Mode) -> tuple[np.ndarray, ControllerState]:
        return hybrid_policy(cs, x_est, q_est, self.gains, self.traj, self.dt, self.fallback, self.events,
                             self.hold_on_entry)


def hybrid_policy(cs: ControllerState, x_est, q_est: Mode, gains: GainSchedule, traj: NominalTrajectory,
                  dt: float = 0.01, fallback: bool = True, events: list | None = None,
                  hold_on_entry=()):
    """One tick of the controller automaton; returns ``(u, cs')``.

    Modes listed in ``hold_on_entry`` skip their time-varying segment: on
    entry the time-invariant trim controller takes over at once.
    """
    sched = gains.schedule
    if not fallback and cs.time_invariant and cs.mode not in hold_on_entry:
        # without the time-invariant stage a timed-out control law stays terminated
        return np.zeros(NU), cs
    if q_est != cs.mode:
        cur = sched.index(cs.mode)
        if q_est in sched and sched.index(q_est) == cur + 1:
            if q_est in hold_on_entry:
                cs = ControllerState(mode=q_est, time_invariant=True, tau=gains.T(q_est))
                _note(events, f"mode change to {q_est.label}: trim controller engaged")
            else:
                cs = ControllerState(mode=q_est, time_invariant=False, tau=0.0)
                _note(events, f"mode change to {q_est.label}: tracking restarted")
        elif q_est in sched and sched.index(q_est) < cur:
            cs = ControllerState(mode=q_est, time_invariant=True, tau=gains.T(q_est))
            _note(events, f"mode regression to {q_est.label}: holding its guard controller")
        elif not cs.time_invariant:
            cs = replace(cs, time_invariant=True, tau=gains.T(cs.mode))
            _note(events, f"estimated mode {q_est.label} is off the schedule: holding {cs.mode.label} guard controller")

    if not cs.time_invariant:
        T = gains.T(cs.mode)
        if cs.tau >= T - 1e-12:
            cs = ControllerState(mode=cs.mode, time_invariant=True, tau=T)
            _note(events, f"{cs.mode.label} time-varying phase ended")
        else:
            u = tvlqr_policy(cs.tau, x_est, cs.mode, gains, traj)
            tau = cs.tau + dt
            if tau >= T - 1e-12:
                _note(events, f"{cs.mode.label} time-varying phase ended")
                return u, ControllerState(mode=cs.mode, time_invariant=True, tau=T)
            return u, replace(cs, tau=tau)
    if not fallback and cs.mode not in hold_on_entry:
        return np.zeros(NU), cs
    return guard_policy(x_est, cs.mode, gains), cs


def _note(events, msg):
    log.debug(msg)
    if events is not None:
        events.append(msg)
