"""Run configuration: one YAML file with a section per pipeline stage.

::

    vehicle:   VehicleParams fields
    trajopt:   TrajOptProblem fields (schedule as {phases, knots}) and a
               ``solver`` block with SolverOptions fields
    control:   ControlWeights fields plus u_min / u_max
    estimator: NoiseConfig fields
    sim:       SimConfig fields (noise comes from the estimator section)

Missing keys take the dataclass defaults; unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .control import U_MAX, U_MIN, ControlWeights
from .dynamics import Mode, VehicleParams
from .estimation import NoiseConfig
from .sim import SimConfig
from .sqp import SolverOptions
from .trajopt import ModeSchedule, TrajOptProblem

SECTIONS = ("vehicle", "trajopt", "control", "estimator", "sim")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str = ""):
        super().__init__(message)
        self.key = key


SCHEDULES = {
    "water-exit": dict(schedule=ModeSchedule()),
    # a swim that ends deeper than it starts; no surface crossing
    "water-only": dict(schedule=ModeSchedule(phases=(Mode.WATER,), knots=(20,)),
                       x_final=(-2.0, -0.5, 0.0, 0.0, 1.0, 0.0, 0.0),
                       delta_final=(1.0, 0.2, 0.3, math.pi / 2, 1.0, 1.0, 5.0)),
}


@dataclass
class RunConfig:
    vehicle: VehicleParams = field(default_factory=VehicleParams)
    trajopt: TrajOptProblem = field(default_factory=TrajOptProblem)
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(time_limit=300.0))
    control: ControlWeights = field(default_factory=ControlWeights)
    u_min: tuple = U_MIN
    u_max: tuple = U_MAX
    sim: SimConfig = field(default_factory=SimConfig)

    @property
    def noise(self) -> NoiseConfig:
        return self.sim.noise

    def with_schedule(self, name: str) -> "RunConfig":
        if name not in SCHEDULES:
            raise ConfigError(f"unknown schedule {name!r}; choose from {', '.join(SCHEDULES)}", "schedule")
        return dataclasses.replace(self, trajopt=dataclasses.replace(self.trajopt, **SCHEDULES[name]))

    def to_dict(self) -> dict:
        tp = _plain(dataclasses.asdict(self.trajopt))
        tp["schedule"] = {"phases": [m.label for m in self.trajopt.schedule.phases],
                          "knots": list(self.trajopt.schedule.knots)}
        tp["solver"] = _plain(dataclasses.asdict(self.solver))
        ctl = _plain(dataclasses.asdict(self.control))
        ctl["u_min"], ctl["u_max"] = _plain(self.u_min), _plain(self.u_max)
        sim = _plain(dataclasses.asdict(self.sim))
        noise = sim.pop("noise")
        return {"vehicle": _plain(dataclasses.asdict(self.vehicle)), "trajopt": tp, "control": ctl,
                "estimator": noise, "sim": sim}

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "config.yaml"
        path.write_text(self.dump())
        return path


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, Mode):
        return v.label
    if isinstance(v, np.ndarray):
        return _plain(v.tolist())
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def _check_keys(section: str, data: dict, allowed) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a mapping", section)
    for k in data:
        if k not in allowed:
            raise ConfigError(f"unknown key {section}.{k}", f"{section}.{k}")


def _build(section: str, cls, data: dict, **extra):
    names = {f.name for f in fields(cls)}
    _check_keys(section, data, names)
    try:
        return cls(**{**extra, **data})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} section: {exc}", section) from exc


def _tuples(d: dict) -> dict:
    return {k: tuple(_tuples_any(v)) if isinstance(v, list) else v for k, v in d.items()}


def _tuples_any(v):
    return [tuple(_tuples_any(x)) if isinstance(x, list) else x for x in v]


def config_from_dict(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    _check_keys("config", raw, SECTIONS)
    veh = _build("vehicle", VehicleParams, dict(raw.get("vehicle") or {}))

    tp = dict(raw.get("trajopt") or {})
    solver_raw = dict(tp.pop("solver", None) or {})
    solver = _build("trajopt.solver", SolverOptions, solver_raw, time_limit=300.0)
    sched = tp.pop("schedule", None)
    if sched is not None:
        _check_keys("trajopt.schedule", sched, {"phases", "knots"})
        try:
            tp["schedule"] = ModeSchedule(**{k: tuple(v) for k, v in sched.items()})
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"invalid trajopt.schedule: {exc}", "trajopt.schedule") from exc
    prob = _build("trajopt", TrajOptProblem, _tuples(tp))

    ctl = dict(raw.get("control") or {})
    u_min = tuple(ctl.pop("u_min", U_MIN))
    u_max = tuple(ctl.pop("u_max", U_MAX))
    weights = _build("control", ControlWeights, _tuples(ctl))

    noise = _build("estimator", NoiseConfig, _tuples(dict(raw.get("estimator") or {})))
    sim_raw = dict(raw.get("sim") or {})
    if "noise" in sim_raw:
        raise ConfigError("unknown key sim.noise (noise lives in the estimator section)", "sim.noise")
    if "param_jitter" in sim_raw and isinstance(sim_raw["param_jitter"], dict):
        sim_raw["param_jitter"] = tuple(sim_raw["param_jitter"].items())
    sim = _build("sim", SimConfig, _tuples(sim_raw), noise=noise)
    return RunConfig(vehicle=veh, trajopt=prob, solver=solver, control=weights,
                     u_min=u_min, u_max=u_max, sim=sim)


def load_config(path=None) -> RunConfig:
    """Read a YAML config (``None`` gives all defaults)."""
    if path is None:
        return RunConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
    return config_from_dict(raw)
