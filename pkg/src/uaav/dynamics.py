"""Planar longitudinal hybrid dynamics of the delta-wing aerial-aquatic vehicle.

State ordering is ``(r_x, r_z, theta, delta, v_x, v_z, omega_y)``; input is
``(delta_dot, thrust)``.  World z points up with the water surface at z = 0,
pitch is positive nose-up and the body z axis is the wing normal (up when
level).  ``R(theta)`` maps body vectors to the world frame.

The force model is a flat plate per panel (fore wing, aft wing, elevon), each
panel seeing the density of the fluid it sits in for the current mode.  With
``C_L = 2 sin(a) cos(a)`` and ``C_D = 2 sin(a)^2 + C_D0`` the panel force is
computed from the local velocity components directly, which keeps it smooth
everywhere except at zero airspeed.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache

import numpy as np

NX = 7
NU = 2

RX, RZ, THETA, DELTA, VX, VZ, OMEGA = range(NX)
STATE_NAMES = ("r_x", "r_z", "theta", "delta", "v_x", "v_z", "omega_y")
INPUT_NAMES = ("delta_dot", "thrust")


class Mode(enum.IntEnum):
    """Fluid-domain mode.  Numbering follows the water-exit schedule 0 -> 1 -> 2."""

    WATER = 0
    TRANSITION_EXIT = 1
    AIR = 2
    TRANSITION_ENTRY = 3

    @property
    def label(self) -> str:
        return _MODE_LABELS[self]

    @classmethod
    def parse(cls, text: str | int | "Mode") -> "Mode":
        if isinstance(text, Mode):
            return text
        if isinstance(text, (int, np.integer)):
            return cls(int(text))
        key = text.strip().replace("-", "_").replace(" ", "_").lower()
        for mode, label in _MODE_LABELS.items():
            if key in (label.lower(), mode.name.lower(), str(int(mode))):
                return mode
        raise ValueError(f"unknown mode {text!r}")


_MODE_LABELS = {
    Mode.WATER: "Water",
    Mode.TRANSITION_EXIT: "TransitionExit",
    Mode.AIR: "Air",
    Mode.TRANSITION_ENTRY: "TransitionEntry",
}

# Sign pattern (nose above surface, elevon tip above surface) inside each mode.
SIGNATURE = {
    Mode.WATER: (False, False),
    Mode.TRANSITION_EXIT: (True, False),
    Mode.AIR: (True, True),
    Mode.TRANSITION_ENTRY: (False, True),
}
_MODE_OF_SIGNATURE = {sig: mode for mode, sig in SIGNATURE.items()}

WATER_EXIT_SCHEDULE = (Mode.WATER, Mode.TRANSITION_EXIT, Mode.AIR)


class ParameterError(ValueError):
    pass


def _diag3(a: float, b: float, c: float) -> tuple:
    return ((a, 0.0, 0.0), (0.0, b, 0.0), (0.0, 0.0, c))


def _default_added_mass() -> tuple:
    water = _diag3(0.05, 1.0, 0.004)
    half = _diag3(0.025, 0.5, 0.002)
    air = _diag3(0.0, 0.0, 0.0)
    return (water, half, air, half)


@dataclass(frozen=True)
class VehicleParams:
    """Physical parameters of the planarized vehicle (SI units).

    Offsets are body-frame vectors measured from the center of mass.
    ``added_mass`` holds one symmetric 3x3 matrix per :class:`Mode`, for the
    ``(v_x, v_z, omega_y)`` channels.
    """

    mass: float = 0.375
    inertia_yy: float = 0.006
    wing_length: float = 0.5
    span: float = 0.61
    chord: float = 0.5
    cg_offset: float = 0.2
    hinge_offset: tuple = (-0.2, 0.0)
    elevon_length: float = 0.05
    displaced_volume: float = 4.0e-4
    buoyancy_center: tuple = (-0.04, 0.0)
    fore_volume_fraction: float = 0.36
    fore_area: float = 0.055
    fore_cp: tuple = (0.1, 0.0)
    aft_area: float = 0.0775
    aft_cp: tuple = (-0.085, 0.0)
    elevon_area: float = 0.02
    cd0: float = 0.01
    added_mass: tuple = field(default_factory=_default_added_mass)
    prop_pitch: float = 0.1016
    rho_water: float = 1000.0
    rho_air: float = 1.22
    gravity: float = 9.81
    drag_multiplier: float = 1.0

    def __post_init__(self):
        # Normalise list inputs (e.g. from YAML) to tuples so params stay hashable.
        for name in ("hinge_offset", "buoyancy_center", "fore_cp", "aft_cp"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        am = self.added_mass
        if isinstance(am, dict):
            am = [am[m.label] if m.label in am else am[m.name.lower()] for m in Mode]
        object.__setattr__(
            self, "added_mass",
            tuple(tuple(tuple(float(v) for v in row) for row in mat) for mat in am),
        )
        self.validate()

    def validate(self) -> None:
        problems = []
        if not self.mass > 0:
            problems.append("mass must be positive")
        if not self.inertia_yy > 0:
            problems.append("inertia_yy must be positive")
        if not self.wing_length > 0:
            problems.append("wing_length must be positive")
        if not 0 < self.cg_offset < self.wing_length:
            problems.append("cg_offset must lie inside (0, wing_length)")
        if len(self.added_mass) != len(Mode):
            problems.append("added_mass needs one 3x3 matrix per mode")
        else:
            for mode, mat in zip(Mode, self.added_mass):
                a = np.asarray(mat, dtype=float)
                if a.shape != (3, 3):
                    problems.append(f"added_mass[{mode.label}] is not 3x3")
                    continue
                if not np.allclose(a, a.T, atol=1e-12):
                    problems.append(f"added_mass[{mode.label}] is not symmetric")
                elif np.linalg.eigvalsh(a).min() < -1e-12:
                    problems.append(f"added_mass[{mode.label}] is not positive semidefinite")
        if self.drag_multiplier < 0:
            problems.append("drag_multiplier must be non-negative")
        if problems:
            raise ParameterError("; ".join(problems))

    @property
    def nose_offset(self) -> float:
        return self.wing_length - self.cg_offset

    def with_(self, **changes) -> "VehicleParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "added_mass":
                value = {m.label: [list(row) for row in mat] for m, mat in zip(Mode, value)}
            elif isinstance(value, tuple):
                value = list(value)
            out[f.name] = value
        return out


@dataclass(frozen=True)
class PlanarState:
    r_x: float = 0.0
    r_z: float = 0.0
    theta: float = 0.0
    delta: float = 0.0
    v_x: float = 0.0
    v_z: float = 0.0
    omega_y: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.r_x, self.r_z, self.theta, self.delta, self.v_x, self.v_z, self.omega_y])

    @classmethod
    def from_array(cls, x) -> "PlanarState":
        return cls(*(float(v) for v in x))


@dataclass(frozen=True)
class ControlInput:
    delta_dot: float = 0.0
    thrust: float = 0.0

    def __post_init__(self):
        if self.thrust < 0:
            raise ValueError("thrust must be non-negative")

    def as_array(self) -> np.ndarray:
        return np.array([self.delta_dot, self.thrust])


@dataclass(frozen=True)
class DensityAssignment:
    rho_fore: float
    rho_aft: float
    rho_elevon: float


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def density_assignment(mode: Mode, params: VehicleParams) -> DensityAssignment:
    return _densities(params, Mode(mode))


@lru_cache(maxsize=256)
def _densities(params: VehicleParams, mode: Mode) -> DensityAssignment:
    w, a = params.rho_water, params.rho_air
    return {
        Mode.WATER: DensityAssignment(w, w, w),
        Mode.TRANSITION_EXIT: DensityAssignment(a, w, w),
        Mode.AIR: DensityAssignment(a, a, a),
        Mode.TRANSITION_ENTRY: DensityAssignment(w, a, a),
    }[mode]


# --------------------------------------------------------------------------
# guards and mode logic


def guard_psi1(x, params: VehicleParams):
    """Height of the nose above the water surface."""
    return x[RZ] + params.nose_offset * np.sin(x[THETA])


def guard_psi2(x, params: VehicleParams):
    """Height of the elevon center-of-pressure point above the water surface."""
    th, de = x[THETA], x[DELTA]
    hx, hz = params.hinge_offset
    l = params.elevon_length
    # e_z . R(th) r_h  +  e_z . R(th + de) (-l e_x)
    return x[RZ] + np.sin(th) * hx + np.cos(th) * hz - l * np.sin(th + de)


def guards(x, params: VehicleParams) -> tuple[float, float]:
    return float(guard_psi1(x, params)), float(guard_psi2(x, params))


def guard_gradients(x, params: VehicleParams) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of (psi1, psi2) with respect to the full state."""
    th, de = x[THETA], x[DELTA]
    hx, hz = params.hinge_offset
    l = params.elevon_length
    g1 = np.zeros(NX)
    g1[RZ] = 1.0
    g1[THETA] = params.nose_offset * math.cos(th)
    g2 = np.zeros(NX)
    g2[RZ] = 1.0
    g2[THETA] = math.cos(th) * hx - math.sin(th) * hz - l * math.cos(th + de)
    g2[DELTA] = -l * math.cos(th + de)
    return g1, g2


def guard_stack(mode: Mode, psi1: float, psi2: float) -> tuple[float, float]:
    """Outgoing guard values of ``mode``; a non-negative entry means that guard fired.

    Entry 0 monitors the nose guard and entry 1 the elevon guard.
    """
    nose_up, tail_up = SIGNATURE[Mode(mode)]
    return (-psi1 if nose_up else psi1, -psi2 if tail_up else psi2)


def signature_mode(psi1: float, psi2: float) -> Mode:
    return _MODE_OF_SIGNATURE[(psi1 > 0, psi2 > 0)]


def successor(mode: Mode, which: int) -> Mode:
    """Mode reached from ``mode`` when guard ``which`` (0 nose, 1 elevon) fires."""
    sig = list(SIGNATURE[Mode(mode)])
    sig[which] = not sig[which]
    return _MODE_OF_SIGNATURE[tuple(sig)]


def mode_transition(x_minus, q_minus: Mode, params: VehicleParams) -> Mode:
    psi1, psi2 = guards(x_minus, params)
    fired = [v >= 0 for v in guard_stack(q_minus, psi1, psi2)]
    if not any(fired):
        return Mode(q_minus)
    sig = list(SIGNATURE[Mode(q_minus)])
    for i, f in enumerate(fired):
        if f:
            sig[i] = not sig[i]
    return _MODE_OF_SIGNATURE[tuple(sig)]


def reset_map(x_minus):
    return x_minus


# --------------------------------------------------------------------------
# forces and equations of motion


def _panel_force(rho, area, cd0, dm, vx, vz):
    """Flat-plate force on a panel in its own frame from the local velocity."""
    speed = np.sqrt(vx * vx + vz * vz)
    inv = np.where(speed > 1e-12, 1.0 / np.maximum(speed, 1e-12), 0.0) if np.ndim(speed) else (
        1.0 / speed if speed > 1e-12 else 0.0
    )
    # lift  = rho S (vx vz / V) (vz, -vx)
    # drag  = -1/2 rho S (2 vz^2 / V + cd0 V) (vx, vz)
    lift = rho * area * vx * vz * inv
    drag = 0.5 * rho * area * dm * (2.0 * vz * vz * inv + cd0 * speed)
    return lift * vz - drag * vx, -lift * vx - drag * vz


def _forces(x, u, mode: Mode, params: VehicleParams):
    th, de, vx, vz, om = x[THETA], x[DELTA], x[VX], x[VZ], x[OMEGA]
    thrust = u[1]
    rho = _densities(params, mode)
    p = params
    dm = p.drag_multiplier
    s, c = np.sin(th), np.cos(th)

    fx = thrust - p.mass * p.gravity * s
    fz = -p.mass * p.gravity * c
    my = 0.0

    buoy = p.gravity * p.displaced_volume * (
        p.fore_volume_fraction * rho.rho_fore + (1.0 - p.fore_volume_fraction) * rho.rho_aft
    )
    bx, bz = buoy * s, buoy * c
    fx = fx + bx
    fz = fz + bz
    my = my + p.buoyancy_center[0] * bz - p.buoyancy_center[1] * bx

    for r_cp, area, dens in ((p.fore_cp, p.fore_area, rho.rho_fore), (p.aft_cp, p.aft_area, rho.rho_aft)):
        px, pz = r_cp
        lvx, lvz = vx - om * pz, vz + om * px
        gx, gz = _panel_force(dens, area, p.cd0, dm, lvx, lvz)
        fx = fx + gx
        fz = fz + gz
        my = my + px * gz - pz * gx

    # elevon: frame rotated by delta, center of pressure behind the hinge
    sd, cdl = np.sin(de), np.cos(de)
    hx, hz = p.hinge_offset
    ex, ez = hx - p.elevon_length * cdl, hz - p.elevon_length * sd
    lvx, lvz = vx - om * ez, vz + om * ex
    evx, evz = cdl * lvx + sd * lvz, -sd * lvx + cdl * lvz
    gx_e, gz_e = _panel_force(rho.rho_elevon, p.elevon_area, p.cd0, dm, evx, evz)
    gx, gz = cdl * gx_e - sd * gz_e, sd * gx_e + cdl * gz_e
    fx = fx + gx
    fz = fz + gz
    my = my + ex * gz - ez * gx
    return fx, fz, my


def forces_moments(x, u, mode: Mode, params: VehicleParams) -> tuple[np.ndarray, float]:
    """Body-frame force (excluding added-mass effects) and pitch moment about the CG."""
    fx, fz, my = _forces(np.asarray(x, float), np.asarray(u, float), Mode(mode), params)
    return np.array([float(fx), float(fz)]), float(my)


@lru_cache(maxsize=256)
def _mass_matrices(params: VehicleParams, mode: Mode):
    ma = np.array(params.added_mass[int(mode)], dtype=float)
    mt = np.diag([params.mass, params.mass, params.inertia_yy]) + ma
    try:
        minv = np.linalg.inv(mt)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - guarded by validate()
        raise ParameterError(f"singular mass matrix in mode {mode.label}") from exc
    return mt, ma, minv


def mass_matrix(params: VehicleParams, mode: Mode) -> np.ndarray:
    """Total generalized mass ``M + M_a`` for the planar channels."""
    return _mass_matrices(params, Mode(mode))[0].copy()


def _rhs(x, u, mode: Mode, params: VehicleParams):
    th, vx, vz, om = x[THETA], x[VX], x[VZ], x[OMEGA]
    mt, ma, minv = _mass_matrices(params, mode)
    fx, fz, my = _forces(x, u, mode, params)

    px = mt[0, 0] * vx + mt[0, 1] * vz + mt[0, 2] * om
    pz = mt[1, 0] * vx + mt[1, 1] * vz + mt[1, 2] * om
    qx = ma[0, 0] * vx + ma[0, 1] * vz + ma[0, 2] * om
    qz = ma[1, 0] * vx + ma[1, 1] * vz + ma[1, 2] * om

    # generalized momentum balance in the rotating body frame
    gx = fx + om * pz
    gz = fz - om * px
    gm = my - (vx * qz - vz * qx)

    s, c = np.sin(th), np.cos(th)
    return (
        c * vx - s * vz,
        s * vx + c * vz,
        om,
        u[0],
        minv[0, 0] * gx + minv[0, 1] * gz + minv[0, 2] * gm,
        minv[1, 0] * gx + minv[1, 1] * gz + minv[1, 2] * gm,
        minv[2, 0] * gx + minv[2, 1] * gz + minv[2, 2] * gm,
    )


def dynamics_f(x, u, mode: Mode, params: VehicleParams) -> np.ndarray:
    """Time derivative of the planar state."""
    return np.array([float(v) for v in _rhs(x, u, Mode(mode), params)])


def dynamics_batch(X: np.ndarray, U: np.ndarray, mode: Mode, params: VehicleParams) -> np.ndarray:
    """Vectorized :func:`dynamics_f` over rows of ``X`` (n, 7) and ``U`` (n, 2)."""
    X = np.asarray(X, float)
    U = np.asarray(U, float)
    out = _rhs(X.T, U.T, Mode(mode), params)
    return np.stack([np.broadcast_to(np.asarray(v, float), X.shape[:1]) for v in out], axis=1)


class LinearizationError(RuntimeError):
    pass


def linearize(x, u, mode: Mode, params: VehicleParams, eps: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians ``(A, B)`` of :func:`dynamics_f` by central differences."""
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    z = np.concatenate([x, u])
    h = eps * np.maximum(1.0, np.abs(z))
    n = z.size
    pts = np.repeat(z[None, :], 2 * n + 1, axis=0)
    idx = np.arange(n)
    pts[1 + idx, idx] += h
    pts[1 + n + idx, idx] -= h
    vals = dynamics_batch(pts[:, :NX], pts[:, NX:], mode, params)
    if not np.all(np.isfinite(vals)):
        raise LinearizationError(f"non-finite dynamics near x={x}, u={u}, mode={Mode(mode).label}")
    jac = ((vals[1:n + 1] - vals[n + 1:]) / (2 * h[:, None])).T
    return jac[:, :NX], jac[:, NX:]


def linearize_batch(X, U, mode: Mode, params: VehicleParams, eps: float = 1e-6):
    """Stacked Jacobians for many points: returns ``A`` (m, 7, 7) and ``B`` (m, 7, 2)."""
    X = np.atleast_2d(np.asarray(X, float))
    U = np.atleast_2d(np.asarray(U, float))
    Z = np.concatenate([X, U], axis=1)
    m, n = Z.shape
    H = eps * np.maximum(1.0, np.abs(Z))
    plus = np.repeat(Z[:, None, :], n, axis=1)
    minus = plus.copy()
    idx = np.arange(n)
    plus[:, idx, idx] += H
    minus[:, idx, idx] -= H
    both = np.concatenate([plus.reshape(-1, n), minus.reshape(-1, n)])
    vals = dynamics_batch(both[:, :NX], both[:, NX:], mode, params)
    if not np.all(np.isfinite(vals)):
        raise LinearizationError(f"non-finite dynamics in batch linearization ({Mode(mode).label})")
    fp = vals[: m * n].reshape(m, n, NX)
    fm = vals[m * n:].reshape(m, n, NX)
    jac = np.transpose((fp - fm) / (2 * H[:, :, None]), (0, 2, 1))
    return jac[:, :, :NX], jac[:, :, NX:]
