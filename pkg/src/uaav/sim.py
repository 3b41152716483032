"""Closed-loop hybrid simulation.

The plant is integrated with fixed-step RK4 at ``dt_physics``.  When a step
ends past one of the current mode's guards, the step is bisected until the
crossing is pinned to within ``event_tol`` metres, the mode switches there and
the remainder of the step is integrated in the new mode.  The controller and
the slow sensors run at ``dt_control`` with a zero-order hold on the input;
the IMU runs at the physics rate.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Callable

import numpy as np

from . import dynamics as dyn
from .control import ControllerState, GainSchedule, hybrid_policy
from .dynamics import NX, Mode, VehicleParams
from .estimation import (HybridEstimator, NoiseConfig, SensorGeometry, SensorPacket,
                         estimate_row, ESTIMATE_COLUMNS)
from .trajopt import DEFAULT_DELTA_INIT, NominalTrajectory

log = logging.getLogger(__name__)


class ChatteringError(RuntimeError):
    """Too many mode switches inside one control period."""


class Outcome(Enum):
    SUCCESS = "Success"
    FALL_FORWARD = "FallForward"
    FALL_BACKWARD = "FallBackward"
    TIMEOUT = "Timeout"


@dataclass(frozen=True)
class SimConfig:
    dt_physics: float = 1e-3
    dt_control: float = 0.01
    t_max: float = 8.0
    seed: int = 0
    noise: NoiseConfig = NoiseConfig()
    noise_scale: float = 1.0
    drag_multiplier: float = 1.0
    x0_mean: tuple | None = None  # None: first knot of the nominal trajectory
    x0_jitter: tuple = DEFAULT_DELTA_INIT
    param_jitter: tuple = (("drag_multiplier", 0.25), ("cg_offset", 0.15))
    exit_kick: tuple = (7.0, 0.5)  # half-widths of the (omega_y, v_z) jump at the first air entry
    truth_feedback: bool = False
    fallback: bool = True
    flight_controller_on_exit: bool = True
    prop_ratio: float = 14.5
    prop_rise_time: float = 0.25
    event_tol: float = 1e-6
    max_switches: int = 10
    stop_on_outcome: bool = True

    def __post_init__(self):
        if not (0 < self.dt_physics <= self.dt_control):
            raise ValueError("need 0 < dt_physics <= dt_control")
        if self.t_max <= 0:
            raise ValueError("t_max must be positive")
        ratio = self.dt_control / self.dt_physics
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("dt_control must be an integer multiple of dt_physics")

    @property
    def substeps(self) -> int:
        return int(round(self.dt_control / self.dt_physics))


# --------------------------------------------------------------------------
# integration


def rk4_step(x, u, mode: Mode, h: float, params: VehicleParams) -> np.ndarray:
    f = dyn.dynamics_f
    k1 = f(x, u, mode, params)
    k2 = f(x + 0.5 * h * k1, u, mode, params)
    k3 = f(x + 0.5 * h * k2, u, mode, params)
    k4 = f(x + h * k3, u, mode, params)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _fired(x, mode: Mode, params: VehicleParams) -> float:
    """Largest outgoing guard value of ``mode``; positive means a guard fired."""
    return max(dyn.guard_stack(mode, *dyn.guards(x, params)))


def hybrid_step(x, mode: Mode, u, h: float, params: VehicleParams, tol: float = 1e-6,
                max_switches: int = 10):
    """Advance ``h`` seconds with event location.

    Returns ``(x, mode, transitions)`` where each transition is
    ``(offset, mode_before, mode_after, x_at_switch)``.  At a located switch
    the crossed guard is in ``(0, tol]``, so the new mode starts strictly
    inside its own domain.
    """
    transitions = []
    done = 0.0
    while True:
        rest = h - done
        x_new = rk4_step(x, u, mode, rest, params)
        if _fired(x_new, mode, params) <= 0.0:
            return x_new, mode, transitions
        lo, hi, x_hi = 0.0, rest, x_new
        for _ in range(80):
            g = _fired(x_hi, mode, params)
            if g <= tol:
                break
            mid = 0.5 * (lo + hi)
            x_mid = rk4_step(x, u, mode, mid, params)
            if _fired(x_mid, mode, params) > 0.0:
                hi, x_hi = mid, x_mid
            else:
                lo = mid
            if hi - lo < 1e-14:
                break
        new_mode = dyn.mode_transition(x_hi, mode, params)
        transitions.append((done + hi, mode, new_mode, x_hi.copy()))
        if len(transitions) > max_switches:
            raise ChatteringError(f"more than {max_switches} mode switches within {h:g} s")
        x, mode, done = dyn.reset_map(x_hi), new_mode, done + hi
        if h - done <= 0.0:
            return x, mode, transitions


@dataclass
class SimTrace:
    """Per-physics-step record of a run (extra rows at located switches)."""

    t: list = field(default_factory=list)
    x: list = field(default_factory=list)
    q: list = field(default_factory=list)
    x_est: list = field(default_factory=list)
    q_est: list = field(default_factory=list)
    ctrl: list = field(default_factory=list)
    tau: list = field(default_factory=list)
    u: list = field(default_factory=list)
    psi: list = field(default_factory=list)
    packets: list = field(default_factory=list)
    estimates: list = field(default_factory=list)
    transitions: list = field(default_factory=list)
    events: list = field(default_factory=list)
    mode_changes: list = field(default_factory=list)  # estimator ModeChange records
    diagnostics: str = ""

    def record(self, t, x, q, x_est, q_est, cs: ControllerState | None, u, params) -> None:
        self.t.append(float(t))
        self.x.append(np.array(x, float))
        self.q.append(Mode(q))
        self.x_est.append(np.array(x_est, float))
        self.q_est.append(Mode(q_est))
        self.ctrl.append(cs.label if cs is not None else "None")
        self.tau.append(cs.tau if cs is not None else 0.0)
        self.u.append(np.array(u, float))
        self.psi.append(dyn.guards(x, params))

    def arrays(self):
        return np.array(self.t), np.array(self.x).reshape(-1, NX), np.array([int(q) for q in self.q])

    def modes_visited(self) -> list:
        out = []
        for q in self.q:
            if not out or out[-1] != q:
                out.append(q)
        return out

    COLUMNS = (("t",) + tuple(f"x_{n}" for n in dyn.STATE_NAMES) + ("mode",)
               + tuple(f"est_{n}" for n in dyn.STATE_NAMES) + ("est_mode", "controller", "tau",
               "u_delta_dot", "u_thrust", "psi1", "psi2"))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# format: uaav-sim-trace\n# version: 1\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.COLUMNS)
            for i in range(len(self.t)):
                w.writerow([_f(self.t[i]), *map(_f, self.x[i]), self.q[i].label, *map(_f, self.x_est[i]),
                            self.q_est[i].label, self.ctrl[i], _f(self.tau[i]), *map(_f, self.u[i]),
                            *map(_f, self.psi[i])])


def integrate_hybrid(x0, q0: Mode, policy: Callable, cfg: SimConfig, params: VehicleParams,
                     t_end: float | None = None) -> SimTrace:
    """Open integration driven by ``policy(t, x, q) -> u`` held over each control period."""
    x = np.array(x0, float)
    q = Mode(q0)
    if _fired(x, q, params) > 0.0:
        raise ValueError(f"initial state lies outside the {q.label} domain")
    t_end = cfg.t_max if t_end is None else t_end
    n_steps = int(round(t_end / cfg.dt_physics))
    tr = SimTrace()
    u = np.zeros(dyn.NU)
    period_switches = 0
    for k in range(n_steps):
        t = k * cfg.dt_physics
        if k % cfg.substeps == 0:
            u = np.asarray(policy(t, x, q), float)
            period_switches = 0
        if k == 0:
            tr.record(t, x, q, x, q, None, u, params)
        x, q_new, sw = hybrid_step(x, q, u, cfg.dt_physics, params, cfg.event_tol, cfg.max_switches)
        period_switches += len(sw)
        if period_switches > cfg.max_switches:
            raise ChatteringError(f"more than {cfg.max_switches} mode switches in one control period at t={t:.3f}")
        for off, a, b, xs in sw:
            tr.transitions.append((t + off, a, b, dyn.guards(xs, params)))
            tr.record(t + off, xs, b, xs, b, None, u, params)
        q = q_new
        tr.record((k + 1) * cfg.dt_physics, x, q, x, q, None, u, params)
    return tr


# --------------------------------------------------------------------------
# sensors


@dataclass
class SensorModel:
    """Synthesizes sensor packets from the true state.

    IMU channels are delta-velocity style: over each physics step the
    accelerometer reports the mean specific force and the attitude channels
    their mean value.  The propeller speed follows the body speed while the
    nose is submerged; once it leaves the water it spins up toward
    ``prop_ratio`` times its last underwater value with a first-order lag
    whose time constant is a third of ``rise_time``.
    """

    params: VehicleParams
    noise: NoiseConfig
    rng: np.random.Generator
    geom: SensorGeometry = SensorGeometry()
    prop_ratio: float = 14.5
    rise_time: float = 0.25
    prop_speed: float = 0.0
    prop_ref: float = 0.0
    prop_in_air: bool = False

    def _n(self, sigma: float, size=None):
        if sigma <= 0:
            return 0.0 if size is None else np.zeros(size)
        return self.rng.normal(0.0, sigma, size)

    def imu(self, t: float, x0, x1, dt: float) -> SensorPacket:
        g = self.params.gravity
        th = 0.5 * (x0[dyn.THETA] + x1[dyn.THETA])
        v0 = dyn.rotation(x0[dyn.THETA]) @ x0[[dyn.VX, dyn.VZ]]
        v1 = dyn.rotation(x1[dyn.THETA]) @ x1[[dyn.VX, dyn.VZ]]
        a_w = (v1 - v0) / dt
        sf = dyn.rotation(th).T @ (a_w + np.array([0.0, g]))
        sf = sf + np.asarray(self.noise.accel_bias, float) + self._n(self.noise.accel, 2)
        return SensorPacket(timestamp=t, accel_body=sf,
                            gyro=0.5 * (x0[dyn.OMEGA] + x1[dyn.OMEGA]) + self._n(self.noise.gyro),
                            theta_meas=th + self._n(self.noise.orientation))

    def advance_prop(self, x, mode: Mode, dt: float) -> None:
        nose_out = mode in (Mode.TRANSITION_EXIT, Mode.AIR)
        if not nose_out:
            self.prop_speed = max(float(x[dyn.VX]), 0.0) / self.params.prop_pitch
            self.prop_ref = self.prop_speed
            self.prop_in_air = False
            return
        self.prop_in_air = True
        tc = self.rise_time / 3.0
        target = self.prop_ratio * self.prop_ref
        self.prop_speed += (target - self.prop_speed) * (1.0 - math.exp(-dt / tc))

    def slow(self, pkt: SensorPacket, x, mode: Mode) -> SensorPacket:
        """Add the control-rate channels to ``pkt`` (in place) and return it."""
        p = self.params
        port_z = x[dyn.RZ] + (dyn.rotation(x[dyn.THETA]) @ np.asarray(self.geom.pressure_port))[1]
        gauge = max(-p.rho_water * p.gravity * port_z, 0.0)
        pressure = max(gauge + self._n(self.noise.pressure), 0.0)
        prop = max(self.prop_speed * (1.0 + self._n(self.noise.prop_speed_rel)), 0.0)
        gps = np.full(2, np.nan)
        if mode == Mode.AIR:
            gps = np.array([x[dyn.RX], x[dyn.RZ]]) + self._n(self.noise.gps, 2)
        pkt.pressure = pressure if mode != Mode.AIR else np.nan
        pkt.prop_speed = prop
        pkt.gps = gps
        pkt.delta = float(x[dyn.DELTA])
        return pkt


def simulate_sensors(truth, truth_mode: Mode, u, rng: np.random.Generator, cfg: SimConfig,
                     params: VehicleParams, t: float = 0.0) -> SensorPacket:
    """One full sensor packet for a state held steady under ``u``."""
    x0 = np.asarray(truth, float)
    xd = dyn.dynamics_f(x0, u, truth_mode, params)
    h = 1e-6
    x1 = x0 + h * xd
    sm = SensorModel(params, cfg.noise.scaled(cfg.noise_scale), rng,
                     prop_ratio=cfg.prop_ratio, rise_time=cfg.prop_rise_time)
    sm.advance_prop(x0, Mode.WATER, 0.0)
    if truth_mode in (Mode.TRANSITION_EXIT, Mode.AIR):
        sm.prop_speed = sm.prop_ref = cfg.prop_ratio * sm.prop_speed
    pkt = sm.imu(t, x0, x1, h)
    return sm.slow(pkt, x0, truth_mode)


# --------------------------------------------------------------------------
# outcomes


def _wrap(a: float) -> float:
    """Angle folded into (-pi, pi]."""
    return a - 2.0 * math.pi * math.ceil((a - math.pi) / (2.0 * math.pi))


@dataclass
class OutcomeMonitor:
    """Sequential outcome classifier; the first decisive event wins."""

    band: tuple = (math.radians(30.0), math.radians(60.0))
    hold: float = 1.0
    flip_pitch: float = math.radians(80.0)
    exited: bool = False
    exit_index: int | None = None
    hold_start: float | None = None
    flipped: bool = False
    prev: tuple | None = None
    outcome: Outcome | None = None

    def push(self, i: int, t: float, x, q: Mode) -> Outcome | None:
        if self.outcome is not None:
            return self.outcome
        th, rz = _wrap(float(x[dyn.THETA])), float(x[dyn.RZ])
        if not self.exited:
            if q == Mode.AIR:
                self.exited, self.exit_index = True, i
            self.prev = (th, rz)
            return None
        if th > self.flip_pitch:
            self.flipped = True
        if rz > 0 and self.band[0] <= th <= self.band[1]:
            if self.hold_start is None:
                self.hold_start = t
            if t - self.hold_start >= self.hold - 1e-9:
                self.outcome = Outcome.SUCCESS
        else:
            self.hold_start = None
        th0, rz0 = self.prev
        if self.outcome is None and rz0 > 0 >= rz:
            if self.flipped:
                self.outcome = Outcome.FALL_BACKWARD
            elif th < math.radians(45.0) and _wrap(th - th0) < 0:
                self.outcome = Outcome.FALL_FORWARD
        self.prev = (th, rz)
        return self.outcome


def classify_outcome(trace: SimTrace) -> Outcome:
    mon = OutcomeMonitor()
    for i, (t, x, q) in enumerate(zip(trace.t, trace.x, trace.q)):
        if mon.push(i, t, x, q) is not None:
            return mon.outcome
    return Outcome.TIMEOUT


def exit_state(trace: SimTrace):
    """(time, pitch, body-z velocity) at the first Air sample, or NaNs."""
    for t, x, q in zip(trace.t, trace.x, trace.q):
        if q == Mode.AIR:
            return float(t), float(x[dyn.THETA]), float(x[dyn.VZ])
    return math.nan, math.nan, math.nan


# --------------------------------------------------------------------------
# closed loop


def run_params(cfg: SimConfig, params: VehicleParams, rng: np.random.Generator) -> VehicleParams:
    """Plant parameters of one run: the configured drag and random model mismatch."""
    p = params.with_(drag_multiplier=params.drag_multiplier * cfg.drag_multiplier)
    for name, half in cfg.param_jitter:
        k = 1.0 + half * rng.uniform(-1.0, 1.0)
        p = p.with_(**{name: getattr(p, name) * k})
    return p


def initial_state(cfg: SimConfig, traj: NominalTrajectory, rng: np.random.Generator) -> np.ndarray:
    mean = traj.phases[0].X[0] if cfg.x0_mean is None else np.asarray(cfg.x0_mean, float)
    half = np.asarray(cfg.x0_jitter, float)
    return mean + half * rng.uniform(-1.0, 1.0, NX)


def closed_loop_run(cfg: SimConfig, traj: NominalTrajectory, gains: GainSchedule,
                    params: VehicleParams) -> tuple[SimTrace, Outcome]:
    """Sensors, estimator and controller around the hybrid plant.

    Any exception raised inside the loop ends the run; it is labelled
    ``Timeout`` and the message is kept in ``trace.diagnostics``.
    """
    rng = np.random.default_rng(cfg.seed)
    x0 = initial_state(cfg, traj, rng)
    plant = run_params(cfg, params, rng)
    kick = np.asarray(cfg.exit_kick, float) * rng.uniform(-1.0, 1.0, 2)
    kicked = not np.any(kick)
    noise = cfg.noise.scaled(cfg.noise_scale)  # what the sensors do
    sensors = SensorModel(plant, noise, np.random.default_rng([cfg.seed, 1]),
                          prop_ratio=cfg.prop_ratio, rise_time=cfg.prop_rise_time)
    mean0 = traj.phases[0].X[0] if cfg.x0_mean is None else np.asarray(cfg.x0_mean, float)
    half = np.asarray(cfg.x0_jitter, float)
    sig = np.maximum(half[[dyn.RX, dyn.RZ]] / math.sqrt(3.0), 1e-6)
    # the filter keeps its nominal tuning whatever the simulated noise level
    est = HybridEstimator.from_state(mean0, params, cfg.noise, pos_sigma=tuple(sig),
                                     vel_sigma=max(float(np.max(half[[dyn.VX, dyn.VZ]])), 1e-3),
                                     bias_sigma=0.3, t0=0.0)
    est.theta, est.delta, est.omega = float(x0[dyn.THETA]), float(x0[dyn.DELTA]), float(x0[dyn.OMEGA])

    tr = SimTrace()
    q = dyn.signature_mode(*dyn.guards(x0, plant))
    x = x0
    cs = ControllerState(mode=gains.schedule[0])
    u = np.zeros(dyn.NU)
    mon = OutcomeMonitor()
    n_steps = int(round(cfg.t_max / cfg.dt_physics))
    dt = cfg.dt_physics
    sensors.advance_prop(x, q, 0.0)
    try:
        if q != gains.schedule[0]:
            raise ValueError(f"initial state is in {q.label}, expected {gains.schedule[0].label}")
        pkt = SensorPacket(timestamp=0.0)
        switches = 0
        for k in range(n_steps):
            t = k * dt
            if k % cfg.substeps == 0:
                switches = 0
                pkt = sensors.slow(pkt, x, q)
                if cfg.truth_feedback:
                    x_fb, q_fb = x, q
                else:
                    est.update(pkt)
                    x_fb, q_fb = est.state_vector(), est.mode
                    tr.estimates.append(estimate_row(t, est))
                tr.packets.append(pkt)
                u, cs = hybrid_policy(cs, x_fb, q_fb, gains, traj, cfg.dt_control, cfg.fallback, tr.events,
                                      (Mode.AIR,) if cfg.flight_controller_on_exit else ())
            if k == 0:
                tr.record(t, x, q, x if cfg.truth_feedback else est.state_vector(), q if cfg.truth_feedback else est.mode,
                          cs, u, plant)
                mon.push(0, t, x, q)
            x1, q1, sw = hybrid_step(x, q, u, dt, plant, cfg.event_tol, cfg.max_switches)
            switches += len(sw)
            if switches > cfg.max_switches:
                raise ChatteringError(f"more than {cfg.max_switches} mode switches in one control period at t={t:.3f}")
            for off, a, b, xs in sw:
                tr.transitions.append((t + off, a, b, dyn.guards(xs, plant)))
                tr.record(t + off, xs, b, tr.x_est[-1], tr.q_est[-1], cs, u, plant)
                mon.push(len(tr.t) - 1, t + off, xs, b)
                if b == Mode.AIR and not kicked:
                    # unmodelled surface effects as the wing leaves the water
                    x1 = x1.copy()
                    x1[dyn.OMEGA] += kick[0]
                    x1[dyn.VZ] += kick[1]
                    kicked = True
            t1 = (k + 1) * dt
            pkt = sensors.imu(t1, x, x1, dt)
            x, q = x1, q1
            sensors.advance_prop(x, q, dt)
            if not cfg.truth_feedback:
                est.predict(pkt)
                tr.record(t1, x, q, est.state_vector(), est.mode, cs, u, plant)
            else:
                if k % cfg.substeps != cfg.substeps - 1:
                    tr.packets.append(pkt)
                tr.record(t1, x, q, x, q, cs, u, plant)
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"non-finite state at t={t1:.3f}")
            if mon.push(len(tr.t) - 1, t1, x, q) is not None and cfg.stop_on_outcome:
                break
    except Exception as exc:  # any component failure ends the run as a Timeout
        tr.mode_changes = list(est.tracker.history)
        tr.diagnostics = f"{type(exc).__name__}: {exc}"
        log.warning("run with seed %d aborted: %s", cfg.seed, tr.diagnostics)
        return tr, Outcome.TIMEOUT
    tr.mode_changes = list(est.tracker.history)
    return tr, (mon.outcome or Outcome.TIMEOUT)


# --------------------------------------------------------------------------
# campaigns


SUMMARY_COLUMNS = ("run", "seed", "outcome", "exit_time", "exit_pitch", "exit_vz_body",
                   "modes", "diagnostics")


def monte_carlo(cfg: SimConfig, traj: NominalTrajectory, gains: GainSchedule, params: VehicleParams,
                n_runs: int, sweep: dict | None = None) -> list[dict]:
    """Run ``n_runs`` seeds (``cfg.seed + i``) at every point of the sweep grid.

    ``sweep`` maps :class:`SimConfig` field names to value lists; the grid is
    their Cartesian product in the order given.  Failures are recorded per row.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    sweep = dict(sweep or {})
    for k in sweep:
        if k not in SimConfig.__dataclass_fields__:
            raise KeyError(f"unknown sweep key {k!r}")
    keys = list(sweep)
    grid = [dict()]
    for k in keys:
        grid = [dict(g, **{k: v}) for g in grid for v in sweep[k]]
    rows = []
    for point in grid:
        for i in range(n_runs):
            c = replace(cfg, seed=cfg.seed + i, **point)
            try:
                tr, out = closed_loop_run(c, traj, gains, params)
                te, pitch, vz = exit_state(tr)
                diag = tr.diagnostics
                modes = "-".join(m.label for m in tr.modes_visited())
            except Exception as exc:
                out, te, pitch, vz, modes = Outcome.TIMEOUT, math.nan, math.nan, math.nan, ""
                diag = f"{type(exc).__name__}: {exc}"
            row = {"run": len(rows), "seed": c.seed, **point, "outcome": out.value, "exit_time": te,
                   "exit_pitch": pitch, "exit_vz_body": vz, "modes": modes, "diagnostics": diag}
            rows.append(row)
            log.info("run %d seed %d %s -> %s", row["run"], c.seed, point, out.value)
    return rows


def aggregate(rows: list[dict], keys=()) -> list[dict]:
    """Outcome counts and success rate per sweep point."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r["outcome"])
    out = []
    for point, outs in groups.items():
        d = dict(zip(keys, point))
        for o in Outcome:
            d[o.value] = outs.count(o.value)
        d["runs"] = len(outs)
        d["success_rate"] = d[Outcome.SUCCESS.value] / len(outs)
        out.append(d)
    return out


def write_summary(rows: list[dict], path, keys=()) -> None:
    cols = ["run", "seed", *keys] + [c for c in SUMMARY_COLUMNS if c not in ("run", "seed")]
    with open(path, "w", newline="") as fh:
        fh.write("# format: uaav-montecarlo\n# version: 1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_f(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
        for a in aggregate(rows, keys):
            point = " ".join(f"{k}={a[k]}" for k in keys)
            counts = " ".join(f"{o.value}={a[o.value]}" for o in Outcome)
            fh.write(f"# aggregate {point} runs={a['runs']} {counts} success_rate={a['success_rate']:.4f}\n".replace("  ", " "))


def write_packets(packets, path) -> None:
    from .estimation import write_sensor_log
    write_sensor_log(packets, path)


def write_estimates(rows, path) -> None:
    from .estimation import write_estimate_trace
    write_estimate_trace(rows, path)


def _f(v) -> str:
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)
