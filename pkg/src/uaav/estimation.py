"""Hybrid state estimation.

A single extended Kalman filter carries the translational state
``(r_x, r_z, v_xw, v_zw, b_ax, b_az)``: position, world-frame velocity and two
accelerometer biases.  The IMU drives the prediction (orientation is an
input), and the measurement model switches with the believed mode:

=====================  =====================================================
Water                  pressure, body velocity (propeller speed along x,
                       zero-sideslip pseudo-measurement along z)
TransitionExit         pressure, attitude-projected depth
Air                    GPS altitude and horizontal position
=====================  =====================================================

Channels that are missing from a packet are NaN and simply dropped from the
update.  The mode belief advances only when the state estimate puts the
guard within two standard deviations of zero *and* a discrete domain sensor
(propeller speed jump, pressure reaching zero) confirms it.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, fields, replace
from enum import Enum

import numpy as np

from . import dynamics as dyn
from .dynamics import Mode, VehicleParams

log = logging.getLogger(__name__)

NE = 6
ERX, ERZ, EVX, EVZ, EBX, EBZ = range(NE)
ESTIMATE_NAMES = ("r_x", "r_z", "v_xw", "v_zw", "b_ax", "b_az")


@dataclass
class EstimatorState:
    mean: np.ndarray
    cov: np.ndarray
    mode_belief: Mode = Mode.WATER

    def copy(self) -> "EstimatorState":
        return EstimatorState(self.mean.copy(), self.cov.copy(), self.mode_belief)


@dataclass(frozen=True)
class NoiseConfig:
    """Sensor noise standard deviations and filter tuning."""

    accel: float = 0.05  # m/s^2
    gyro: float = 0.01  # rad/s
    orientation: float = 0.01  # rad
    pressure: float = 50.0  # Pa
    prop_speed_rel: float = 0.02  # fraction of reading
    gps: float = 0.5  # m
    bias_walk: float = 1e-6  # m^2/s^5, bias random-walk spectral density
    sideslip: float | None = None  # m/s; body-z velocity pseudo-measurement, None disables it
    accel_bias: tuple = (0.0, 0.0)  # injected constant bias, m/s^2

    def scaled(self, k: float) -> "NoiseConfig":
        names = ("accel", "gyro", "orientation", "pressure", "prop_speed_rel", "gps")
        return replace(self, **{n: getattr(self, n) * k for n in names})


@dataclass(frozen=True)
class SensorGeometry:
    """Where the pressure port sits, in body coordinates relative to the CoM."""

    pressure_port: tuple = (-0.2, 0.0)


# --------------------------------------------------------------------------
# packets and events


@dataclass
class SensorPacket:
    timestamp: float
    accel_body: np.ndarray = field(default_factory=lambda: np.full(2, np.nan))
    gyro: float = np.nan
    theta_meas: float = np.nan
    pressure: float = np.nan
    prop_speed: float = np.nan
    gps: np.ndarray = field(default_factory=lambda: np.full(2, np.nan))
    delta: float = np.nan  # elevon servo feedback

    COLUMNS = ("timestamp", "accel_x", "accel_z", "gyro", "theta_meas", "pressure",
               "prop_speed", "gps_x", "gps_z", "delta")

    def row(self) -> list:
        return [self.timestamp, *self.accel_body, self.gyro, self.theta_meas, self.pressure,
                self.prop_speed, *self.gps, self.delta]

    @classmethod
    def from_row(cls, r) -> "SensorPacket":
        v = [float(x) for x in r]
        return cls(timestamp=v[0], accel_body=np.array(v[1:3]), gyro=v[3], theta_meas=v[4],
                   pressure=v[5], prop_speed=v[6], gps=np.array(v[7:9]), delta=v[9])


class EventKind(Enum):
    PROP_SPEED_JUMP = "PropSpeedJump"
    PRESSURE_AIR_CROSSING = "PressureAirCrossing"


@dataclass(frozen=True)
class ModeEvent:
    kind: EventKind
    timestamp: float


# --------------------------------------------------------------------------
# process model


def process_noise(dt: float, noise: NoiseConfig) -> np.ndarray:
    """Discrete process noise for one prediction step of length ``dt``."""
    qa = noise.accel ** 2
    Q = np.zeros((NE, NE))
    for p, v in ((ERX, EVX), (ERZ, EVZ)):
        Q[p, p] = qa * dt ** 3 / 3.0
        Q[p, v] = Q[v, p] = qa * dt ** 2 / 2.0
        Q[v, v] = qa * dt
    Q[EBX, EBX] = Q[EBZ, EBZ] = noise.bias_walk * dt
    return Q


def ekf_predict(est: EstimatorState, accel_body, theta_meas: float, dt: float, Q_proc,
                gravity: float = 9.81) -> EstimatorState:
    """Propagate with the IMU specific force as input.

    ``a_w = R(theta) (a_meas - b) + (0, -g)``; position takes the exact
    second-order step for a constant acceleration over ``dt``.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    m = est.mean
    R = dyn.rotation(theta_meas)
    a_w = R @ (np.asarray(accel_body, float) - m[EBX:EBZ + 1]) + np.array([0.0, -gravity])
    mean = m.copy()
    mean[ERX:ERZ + 1] += m[EVX:EVZ + 1] * dt + 0.5 * a_w * dt * dt
    mean[EVX:EVZ + 1] += a_w * dt
    F = np.eye(NE)
    F[ERX:ERZ + 1, EVX:EVZ + 1] = dt * np.eye(2)
    F[ERX:ERZ + 1, EBX:EBZ + 1] = -0.5 * dt * dt * R
    F[EVX:EVZ + 1, EBX:EBZ + 1] = -dt * R
    P = F @ est.cov @ F.T + Q_proc
    return EstimatorState(mean, 0.5 * (P + P.T), est.mode_belief)


# --------------------------------------------------------------------------
# measurement models: each returns (prediction, Jacobian)


def _pressure_channel(mean, theta, params: VehicleParams, geom: SensorGeometry):
    port = dyn.rotation(theta) @ np.asarray(geom.pressure_port, float)
    k = params.rho_water * params.gravity
    y = k * (mean[ERZ] + port[1])
    H = np.zeros(NE)
    H[ERZ] = k
    return y, H


def measurement_water(est: EstimatorState, theta: float, params: VehicleParams,
                      geom: SensorGeometry = SensorGeometry()):
    """Signed pressure ``rho g z`` at the port, and ``R(theta)' v_world``."""
    m = est.mean
    yp, Hp = _pressure_channel(m, theta, params, geom)
    R = dyn.rotation(theta)
    vb = R.T @ m[EVX:EVZ + 1]
    H = np.zeros((3, NE))
    H[0] = Hp
    H[1:, EVX:EVZ + 1] = R.T
    return np.array([yp, vb[0], vb[1]]), H


def measurement_transition(est: EstimatorState, theta: float, params: VehicleParams,
                           geom: SensorGeometry = SensorGeometry()):
    """Signed pressure and the attitude-projected depth ``cos(theta) r_z``."""
    m = est.mean
    yp, Hp = _pressure_channel(m, theta, params, geom)
    H = np.zeros((2, NE))
    H[0] = Hp
    H[1, ERZ] = math.cos(theta)
    return np.array([yp, math.cos(theta) * m[ERZ]]), H


def measurement_air(est: EstimatorState, theta: float, params: VehicleParams,
                    geom: SensorGeometry = SensorGeometry()):
    """GPS altitude, GPS horizontal position and ``cos(theta) r_z``."""
    m = est.mean
    H = np.zeros((3, NE))
    H[0, ERZ] = 1.0
    H[1, ERX] = 1.0
    H[2, ERZ] = math.cos(theta)
    return np.array([m[ERZ], m[ERX], math.cos(theta) * m[ERZ]]), H


MEASUREMENT_MODELS = {
    Mode.WATER: measurement_water,
    Mode.TRANSITION_EXIT: measurement_transition,
    Mode.AIR: measurement_air,
}


def ekf_update(est: EstimatorState, y_meas, mode: Mode, R_meas, theta: float = 0.0,
               params: VehicleParams = VehicleParams(), geom: SensorGeometry = SensorGeometry(),
               log_to: list | None = None) -> EstimatorState:
    """Joseph-form update with the measurement model of ``mode``.

    Only the finite channels of ``y_meas`` are used.  If the innovation
    covariance cannot be factored the prior is returned unchanged.
    """
    model = MEASUREMENT_MODELS[Mode(mode)]
    y_pred, H = model(est, theta, params, geom)
    return ekf_update_linear(est, y_meas, y_pred, H, R_meas, log_to)


def ekf_update_linear(est: EstimatorState, y_meas, y_pred, H, R_meas,
                      log_to: list | None = None) -> EstimatorState:
    """Update given an explicit prediction and measurement Jacobian."""
    y_meas = np.asarray(y_meas, float)
    ok = np.isfinite(y_meas)
    if not ok.any():
        return est
    H = np.atleast_2d(H)[ok]
    R = np.atleast_2d(R_meas)[np.ix_(ok, ok)]
    nu = y_meas[ok] - np.asarray(y_pred, float)[ok]
    P = est.cov
    S = H @ P @ H.T + R
    try:
        c = np.linalg.cholesky(0.5 * (S + S.T))
    except np.linalg.LinAlgError:
        log.warning("innovation covariance is not invertible; update skipped")
        return est
    K = np.linalg.solve(c.T, np.linalg.solve(c, H @ P)).T
    mean = est.mean + K @ nu
    IKH = np.eye(NE) - K @ H
    Pn = IKH @ P @ IKH.T + K @ R @ K.T
    if log_to is not None:
        log_to.append((nu, S))
    return EstimatorState(mean, 0.5 * (Pn + Pn.T), est.mode_belief)


# --------------------------------------------------------------------------
# propeller


def prop_velocity(omega_p: float, p: float) -> float:
    """Forward speed implied by the propeller speed (rev/s) and pitch (m/rev)."""
    if omega_p < 0:
        raise ValueError("propeller speed must be non-negative")
    return p * omega_p


@dataclass
class PropJumpDetector:
    """Edge-triggered detector for the propeller speeding up when it leaves
    the water.

    The baseline is the median over ``baseline_window`` samples that end
    ``short_window`` samples ago (the median keeps the first samples of a
    rise from dragging the baseline up); the event fires when the mean of the last
    ``short_window`` samples exceeds ``threshold`` times the baseline.  The
    event is stamped with the first sample of the short window so the
    confirmation logic sees the physical onset rather than the detection
    instant.  It re-arms once the ratio falls back below the threshold.
    """

    threshold: float = 5.0
    short_window: int = 3
    baseline_window: int = 10
    history: list = field(default_factory=list)
    armed: bool = True

    def push(self, t: float, speed: float) -> ModeEvent | None:
        if not np.isfinite(speed):
            return None
        self.history.append((t, float(speed)))
        need = self.short_window + self.baseline_window
        if len(self.history) > need:
            self.history = self.history[-need:]
        if len(self.history) < self.short_window + 1:
            return None
        short = self.history[-self.short_window:]
        base = self.history[:-self.short_window]
        base_mean = float(np.median([s for _, s in base]))
        short_mean = float(np.mean([s for _, s in short]))
        if base_mean <= 0:
            return None
        ratio = short_mean / base_mean
        if ratio >= self.threshold and self.armed:
            self.armed = False
            return ModeEvent(EventKind.PROP_SPEED_JUMP, short[0][0])
        if ratio < self.threshold and short_mean < self.threshold * min(s for _, s in base):
            self.armed = True
        return None


def prop_jump_detector(history, dt: float = 0.01, threshold: float = 5.0, short_window: int = 3):
    """Scan a sequence of equally spaced propeller speeds; return the first event or ``None``."""
    det = PropJumpDetector(threshold=threshold, short_window=short_window)
    for i, s in enumerate(history):
        ev = det.push(i * dt, s)
        if ev is not None:
            return ev
    return None


@dataclass
class PressureCrossingDetector:
    """Fires once when the pressure reading drops to (near) zero gauge."""

    threshold: float = 100.0  # Pa
    armed: bool = False

    def push(self, t: float, pressure: float) -> ModeEvent | None:
        if not np.isfinite(pressure):
            return None
        if pressure > 2.0 * self.threshold:
            self.armed = True
        elif pressure <= self.threshold and self.armed:
            self.armed = False
            return ModeEvent(EventKind.PRESSURE_AIR_CROSSING, t)
        return None


# --------------------------------------------------------------------------
# mode estimation

# forward edges of the water-exit schedule: (from, to, guard index, confirming event)
CONFIRMED_EDGES = {
    Mode.WATER: (Mode.TRANSITION_EXIT, 0, EventKind.PROP_SPEED_JUMP),
    Mode.TRANSITION_EXIT: (Mode.AIR, 1, EventKind.PRESSURE_AIR_CROSSING),
}


def guard_sigmas(est: EstimatorState, theta: float, delta: float, params: VehicleParams,
                 theta_sigma: float = 0.0) -> tuple[float, float]:
    """First-order standard deviations of the guards from the estimate covariance."""
    x = np.zeros(dyn.NX)
    x[dyn.RZ] = est.mean[ERZ]
    x[dyn.THETA] = theta
    x[dyn.DELTA] = delta
    g1, g2 = dyn.guard_gradients(x, params)
    var_z = est.cov[ERZ, ERZ]
    s1 = math.sqrt(max(g1[dyn.RZ] ** 2 * var_z + (g1[dyn.THETA] * theta_sigma) ** 2, 0.0))
    s2 = math.sqrt(max(g2[dyn.RZ] ** 2 * var_z + (g2[dyn.THETA] * theta_sigma) ** 2, 0.0))
    return s1, s2


def mode_estimator(est: EstimatorState, guard_vals, sigmas, events, now: float | None = None,
                   window: float = 0.3) -> Mode:
    """Stateless fusion rule: advance iff the guard is inside its 2-sigma gate
    and the confirming event fired within ``window`` seconds of ``now``."""
    mode = est.mode_belief
    edge = CONFIRMED_EDGES.get(mode)
    if edge is None:
        return mode
    nxt, which, kind = edge
    if abs(guard_vals[which]) > 2.0 * sigmas[which]:
        return mode
    for ev in events:
        if ev.kind == kind and (now is None or abs(now - ev.timestamp) <= window):
            return nxt
    return mode


@dataclass
class ModeTracker:
    """Stateful version of :func:`mode_estimator` for a running filter.

    A tick counts as a gate pass when the guard is within 2 sigma of zero or
    changed sign since the previous tick (a fast crossing can jump the gate
    between ticks).  The mode advances when a gate pass and the confirming
    event lie within ``window`` seconds of each other.
    """

    mode: Mode = Mode.WATER
    window: float = 0.3
    gate_times: list = field(default_factory=list)
    events: list = field(default_factory=list)
    prev_guard: float | None = None
    history: list = field(default_factory=list)

    def update(self, t: float, guard_vals, sigmas, new_events=()) -> Mode:
        self.events.extend(new_events)
        edge = CONFIRMED_EDGES.get(self.mode)
        if edge is None:
            return self.mode
        nxt, which, kind = edge
        g, sg = float(guard_vals[which]), float(sigmas[which])
        crossed = self.prev_guard is not None and (self.prev_guard < 0) != (g < 0)
        self.prev_guard = g
        if abs(g) <= 2.0 * sg or crossed:
            self.gate_times.append((t, g, sg, crossed))
        self.gate_times = [s for s in self.gate_times if t - s[0] <= 2.0 * self.window]
        evs = [e for e in self.events if e.kind == kind and t - e.timestamp <= 2.0 * self.window]
        for e in evs:
            passes = [s for s in self.gate_times if abs(s[0] - e.timestamp) <= self.window]
            if passes and abs(t - e.timestamp) <= self.window:
                gate = min(passes, key=lambda s: abs(s[1]) / max(s[2], 1e-12))
                self.history.append(ModeChange(t, self.mode, nxt, e, *gate))
                self.mode = nxt
                self.gate_times = []
                self.prev_guard = None
                self.events = [x for x in self.events if x is not e]
                break
        return self.mode


@dataclass(frozen=True)
class ModeChange:
    """Evidence behind one estimated transition: the confirming event and the
    gate pass (time, guard value, guard sigma, sign change) it was paired with."""

    time: float
    before: Mode
    after: Mode
    event: ModeEvent
    gate_time: float
    guard: float
    sigma: float
    crossed: bool


# --------------------------------------------------------------------------
# the running estimator


def measurement_noise(mode: Mode, noise: NoiseConfig, params: VehicleParams, prop_speed: float = 0.0,
                      geom: SensorGeometry = SensorGeometry()):
    if mode == Mode.WATER:
        sv = max(noise.prop_speed_rel * prop_speed * params.prop_pitch, 1e-3)
        return np.diag([noise.pressure ** 2, sv ** 2, (noise.sideslip or 1.0) ** 2])
    if mode == Mode.TRANSITION_EXIT:
        sd = noise.pressure / (params.rho_water * params.gravity)
        return np.diag([noise.pressure ** 2, max(sd, 1e-3) ** 2])
    return np.diag([noise.gps ** 2, noise.gps ** 2, noise.gps ** 2])


def measurement_vector(pkt: SensorPacket, mode: Mode, params: VehicleParams, sideslip: bool = False):
    """Arrange a packet's slow channels into the mode's measurement vector.

    The pressure sensor reports positive gauge pressure for submersion and
    zero above the surface; it is mapped to the signed ``rho g z`` channel.
    A zero reading only says the port is out of the water, so it is treated
    as unavailable.
    """
    p = pkt.pressure
    yp = -p if np.isfinite(p) and p > 0 else np.nan
    if mode == Mode.WATER:
        vx = prop_velocity(pkt.prop_speed, params.prop_pitch) if np.isfinite(pkt.prop_speed) else np.nan
        return np.array([yp, vx, 0.0 if sideslip and np.isfinite(vx) else np.nan])
    if mode == Mode.TRANSITION_EXIT:
        return np.array([yp, np.nan])
    if mode == Mode.AIR:
        return np.array([pkt.gps[1], pkt.gps[0], np.nan])
    return np.full(3, np.nan)


def _fill_depth_projection(y, pkt: SensorPacket, params: VehicleParams, geom: SensorGeometry):
    """In TransitionExit the projected-depth channel is derived from pressure and attitude."""
    if np.isfinite(y[0]) and np.isfinite(pkt.theta_meas):
        port_z = (dyn.rotation(pkt.theta_meas) @ np.asarray(geom.pressure_port))[1]
        rz = y[0] / (params.rho_water * params.gravity) - port_z
        y[1] = math.cos(pkt.theta_meas) * rz
    return y


@dataclass
class HybridEstimator:
    """EKF plus mode tracker fed with :class:`SensorPacket` objects."""

    params: VehicleParams
    noise: NoiseConfig = NoiseConfig()
    geom: SensorGeometry = SensorGeometry()
    state: EstimatorState | None = None
    tracker: ModeTracker = field(default_factory=ModeTracker)
    prop_detector: PropJumpDetector = field(default_factory=PropJumpDetector)
    pressure_detector: PressureCrossingDetector = field(default_factory=PressureCrossingDetector)
    last_time: float | None = None
    innovations: list = field(default_factory=list)
    theta: float = 0.0
    omega: float = 0.0
    delta: float = 0.0

    @classmethod
    def from_state(cls, x0, params: VehicleParams, noise: NoiseConfig = NoiseConfig(),
                   pos_sigma=(0.3, 0.06), vel_sigma: float = 0.05, bias_sigma: float = 0.3,
                   mode: Mode = Mode.WATER, t0: float | None = None, **kw) -> "HybridEstimator":
        x0 = np.asarray(x0, float)
        vw = dyn.rotation(x0[dyn.THETA]) @ x0[[dyn.VX, dyn.VZ]]
        mean = np.array([x0[dyn.RX], x0[dyn.RZ], vw[0], vw[1], 0.0, 0.0])
        cov = np.diag([pos_sigma[0] ** 2, pos_sigma[1] ** 2, vel_sigma ** 2, vel_sigma ** 2,
                       bias_sigma ** 2, bias_sigma ** 2])
        est = cls(params=params, noise=noise, state=EstimatorState(mean, cov, mode), **kw)
        est.tracker.mode = mode
        est.theta = float(x0[dyn.THETA])
        est.delta = float(x0[dyn.DELTA])
        est.omega = float(x0[dyn.OMEGA])
        est.last_time = t0
        return est

    @property
    def mode(self) -> Mode:
        return self.tracker.mode

    def predict(self, pkt: SensorPacket) -> None:
        if self.last_time is None:
            self.last_time = pkt.timestamp
        dt = pkt.timestamp - self.last_time
        if np.isfinite(pkt.theta_meas):
            self.theta = pkt.theta_meas
        if np.isfinite(pkt.gyro):
            self.omega = pkt.gyro
        if np.isfinite(pkt.delta):
            self.delta = pkt.delta
        if dt > 0 and np.all(np.isfinite(pkt.accel_body)):
            self.state = ekf_predict(self.state, pkt.accel_body, self.theta, dt,
                                     process_noise(dt, self.noise), self.params.gravity)
        self.last_time = pkt.timestamp

    def update(self, pkt: SensorPacket) -> Mode:
        """Measurement update and mode tracking with the slow channels of ``pkt``."""
        if np.isfinite(pkt.delta):
            self.delta = pkt.delta
        mode = self.tracker.mode
        model = MEASUREMENT_MODELS.get(mode)
        if model is not None:
            y = measurement_vector(pkt, mode, self.params, self.noise.sideslip is not None)
            if mode == Mode.TRANSITION_EXIT:
                y = _fill_depth_projection(y, pkt, self.params, self.geom)
            y_pred, H = model(self.state, self.theta, self.params, self.geom)
            Rm = measurement_noise(mode, self.noise, self.params,
                                   pkt.prop_speed if np.isfinite(pkt.prop_speed) else 0.0, self.geom)
            y = self._gate(y, y_pred, H, Rm)
            self.state = ekf_update_linear(self.state, y, y_pred, H, Rm, self.innovations)
        events = []
        for det, val in ((self.prop_detector, pkt.prop_speed), (self.pressure_detector, pkt.pressure)):
            ev = det.push(pkt.timestamp, val)
            if ev is not None:
                events.append(ev)
        gv = self.guard_values()
        sg = guard_sigmas(self.state, self.theta, self.delta, self.params, self.noise.orientation)
        new_mode = self.tracker.update(pkt.timestamp, gv, sg, events)
        self.state.mode_belief = new_mode
        return new_mode

    def _gate(self, y, y_pred, H, Rm, k: float = 5.0):
        """Drop channels whose innovation exceeds ``k`` standard deviations."""
        y = np.array(y, float)
        S = H @ self.state.cov @ H.T + Rm
        for i in range(y.size):
            if np.isfinite(y[i]) and abs(y[i] - y_pred[i]) > k * math.sqrt(S[i, i]):
                log.debug("measurement channel %d gated out (innovation %.3g)", i, y[i] - y_pred[i])
                y[i] = np.nan
        return y

    def guard_values(self) -> tuple[float, float]:
        return dyn.guards(self.state_vector(), self.params)

    def state_vector(self) -> np.ndarray:
        """Full 7-state estimate for the controller (attitude from the IMU,
        elevon angle from servo feedback)."""
        m = self.state.mean
        vb = dyn.rotation(self.theta).T @ m[EVX:EVZ + 1]
        return np.array([m[ERX], m[ERZ], self.theta, self.delta, vb[0], vb[1], self.omega])


# --------------------------------------------------------------------------
# logs


def write_sensor_log(packets, path_or_buf) -> None:
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        fh.write("# format: uaav-sensor-log\n# version: 1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SensorPacket.COLUMNS)
        for p in packets:
            w.writerow([_f(v) for v in p.row()])
    finally:
        if own:
            fh.close()


def read_sensor_log(path) -> list:
    with open(path) as fh:
        rows = [r for r in csv.reader(ln for ln in fh if not ln.startswith("#"))]
    if not rows or tuple(rows[0]) != SensorPacket.COLUMNS:
        raise ValueError(f"{path}: unexpected sensor-log header")
    return [SensorPacket.from_row(r) for r in rows[1:]]


def replay(packets, x0, params: VehicleParams, noise: NoiseConfig = NoiseConfig(),
           control_dt: float = 0.01) -> list:
    """Run the estimator over a recorded packet stream.

    Packets carrying slow channels (pressure, propeller, GPS) trigger an
    update after the prediction.  Returns rows for :func:`write_estimate_trace`.
    """
    est = HybridEstimator.from_state(x0, params, noise)
    rows = []
    for pkt in packets:
        est.predict(pkt)
        slow = np.isfinite(pkt.pressure) or np.isfinite(pkt.prop_speed) or np.all(np.isfinite(pkt.gps))
        if slow:
            est.update(pkt)
            rows.append(estimate_row(pkt.timestamp, est))
    return rows


ESTIMATE_COLUMNS = ("timestamp",) + ESTIMATE_NAMES + tuple(f"sigma_{n}" for n in ESTIMATE_NAMES) + ("mode",)


def estimate_row(t: float, est: HybridEstimator) -> list:
    s = est.state
    return [t, *s.mean, *np.sqrt(np.maximum(np.diag(s.cov), 0.0)), est.mode.label]


def write_estimate_trace(rows, path_or_buf) -> None:
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        fh.write("# format: uaav-estimates\n# version: 1\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ESTIMATE_COLUMNS)
        for r in rows:
            w.writerow([_f(v) if not isinstance(v, str) else v for v in r])
    finally:
        if own:
            fh.close()


def _f(v) -> str:
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)
