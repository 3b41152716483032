"""Command-line front end.

::

    uaav optimize   --config run.yaml --out runs/traj
    uaav gains      --config run.yaml --traj runs/traj/trajectory.csv --out runs/gains
    uaav simulate   --config run.yaml --traj ... --gains ... --out runs/sim --seed 1
    uaav montecarlo --config run.yaml --traj ... --gains ... --out runs/mc --runs 20

Exit status: 0 success, 2 configuration or input error, 3 solver error,
4 simulation error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .config import SCHEDULES, ConfigError, RunConfig, load_config
from .control import GainSchedule, RiccatiDivergenceError, TrimError, synthesize
from .sim import Outcome, aggregate, closed_loop_run, exit_state, monte_carlo, write_summary
from .sqp import SolverError
from .trajopt import (DynamicsEvaluationError, NominalTrajectory, ProblemValidationError,
                      TrajectoryFormatError, optimize_water_exit)

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_SIM = 0, 2, 3, 4

log = logging.getLogger("uaav")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load(args) -> RunConfig:
    try:
        cfg = load_config(args.config)
        if getattr(args, "schedule", None):
            cfg = cfg.with_schedule(args.schedule)
        return cfg
    except ConfigError as exc:
        raise CliError(f"config error: {exc}", EXIT_CONFIG) from exc
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}", EXIT_CONFIG) from exc


def _read_traj(path, cfg: RunConfig) -> NominalTrajectory:
    try:
        return NominalTrajectory.from_csv(path, cfg.vehicle)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"invalid trajectory {path}: {exc}", EXIT_CONFIG) from exc


def _read_gains(path) -> GainSchedule:
    try:
        return GainSchedule.from_csv(path)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError(f"invalid gain schedule {path}: {exc}", EXIT_CONFIG) from exc


# --------------------------------------------------------------------------
# commands


def cmd_optimize(args) -> int:
    cfg = _load(args)
    out = _out_dir(args.out)
    cfg.write(out)
    try:
        traj = optimize_water_exit(cfg.trajopt, cfg.vehicle, cfg.solver)
    except ProblemValidationError as exc:
        raise CliError(f"problem validation failed: {exc}", EXIT_CONFIG) from exc
    except (SolverError, DynamicsEvaluationError) as exc:
        report = {"status": "failed", "message": str(exc)}
        (out / "solver_report.yaml").write_text(yaml.safe_dump(report, sort_keys=False))
        raise CliError(f"solver failed: {exc}", EXIT_SOLVER) from exc
    traj.to_csv(out / "trajectory.csv")
    x_end = traj.phases[-1].X[-1]
    report = {
        "status": traj.info.get("status", "converged"),
        "iterations": int(traj.info.get("iterations", 0)),
        "cost": float(traj.info.get("cost", float("nan"))),
        "max_violation": float(traj.info.get("max_violation", float("nan"))),
        "schedule": [ph.mode.label for ph in traj.phases],
        "durations": [float(ph.duration) for ph in traj.phases],
        "final_state": [float(v) for v in x_end],
        "final_in_box": bool(np.all(np.abs(x_end - np.asarray(cfg.trajopt.x_final))
                                    <= np.asarray(cfg.trajopt.delta_final) + 1e-9)),
    }
    (out / "solver_report.yaml").write_text(yaml.safe_dump(report, sort_keys=False))
    print(f"optimize: {report['status']} in {report['iterations']} iterations, cost {report['cost']:.6g}, "
          f"max violation {report['max_violation']:.2e}, phases "
          + ", ".join(f"{m} {d:.3f}s" for m, d in zip(report["schedule"], report["durations"])))
    return EXIT_OK


def cmd_gains(args) -> int:
    cfg = _load(args)
    out = _out_dir(args.out)
    cfg.write(out)
    traj = _read_traj(args.traj, cfg)
    try:
        gains = synthesize(traj, cfg.vehicle, cfg.control, cfg.u_min, cfg.u_max)
    except RiccatiDivergenceError as exc:
        phase = exc.mode.label if exc.mode is not None else "unknown"
        raise CliError(f"Riccati divergence in phase {phase}: {exc}", EXIT_SOLVER) from exc
    except TrimError as exc:
        raise CliError(f"trim failed: {exc}", EXIT_SOLVER) from exc
    gains.to_csv(out / "gains.csv")
    for p in gains.phases:
        eig = np.linalg.eigvalsh(p.S)
        print(f"gains: {p.mode.label:15s} T={p.T:.4f}s samples={p.taus.size} "
              f"S eigenvalues [{eig.min():.4g}, {eig.max():.4g}]")
    return EXIT_OK


def _sim_config(cfg: RunConfig, args):
    sim = cfg.sim
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.drag is not None:
        changes["drag_multiplier"] = args.drag
    if args.no_fallback:
        changes["fallback"] = False
    if args.truth_feedback:
        changes["truth_feedback"] = True
    try:
        return dataclasses.replace(sim, **changes)
    except ValueError as exc:
        raise CliError(f"config error: {exc}", EXIT_CONFIG) from exc


def cmd_simulate(args) -> int:
    cfg = _load(args)
    sim = _sim_config(cfg, args)
    cfg = dataclasses.replace(cfg, sim=sim)
    out = _out_dir(args.out)
    cfg.write(out)
    traj = _read_traj(args.traj, cfg)
    gains = _read_gains(args.gains)
    tr, outcome = closed_loop_run(sim, traj, gains, cfg.vehicle)
    tr.to_csv(out / "trace.csv")
    from .estimation import write_estimate_trace, write_sensor_log
    write_sensor_log(tr.packets, out / "sensors.csv")
    if tr.estimates:
        write_estimate_trace(tr.estimates, out / "estimates.csv")
    te, pitch, vz = exit_state(tr)
    visited = [m.label for m in tr.modes_visited()]
    modes = "-".join(visited if len(visited) <= 8 else visited[:6] + [f"...({len(visited)} modes)"])
    print(f"outcome={outcome.value} seed={sim.seed} exit_time={te:.3f} exit_pitch={pitch:.4f} "
          f"exit_vz_body={vz:.4f} modes={modes}")
    if tr.diagnostics:
        print(f"simulation error: {tr.diagnostics}", file=sys.stderr)
        return EXIT_SIM
    return EXIT_OK


def _parse_sweep(items) -> dict:
    sweep = {}
    for item in items or []:
        if "=" not in item:
            raise CliError(f"--sweep expects key=v1,v2,... (got {item!r})", EXIT_CONFIG)
        key, vals = item.split("=", 1)
        key = {"drag": "drag_multiplier", "noise": "noise_scale"}.get(key, key)
        try:
            sweep[key] = [yaml.safe_load(v) for v in vals.split(",") if v]
        except yaml.YAMLError as exc:
            raise CliError(f"bad sweep values {vals!r}", EXIT_CONFIG) from exc
    return sweep


def cmd_montecarlo(args) -> int:
    cfg = _load(args)
    sim = _sim_config(cfg, args)
    cfg = dataclasses.replace(cfg, sim=sim)
    if args.runs < 1:
        raise CliError("--runs must be at least 1", EXIT_CONFIG)
    sweep = _parse_sweep(args.sweep)
    out = _out_dir(args.out)
    cfg.write(out)
    traj = _read_traj(args.traj, cfg)
    gains = _read_gains(args.gains)
    try:
        rows = monte_carlo(sim, traj, gains, cfg.vehicle, args.runs, sweep)
    except (KeyError, ValueError, TypeError) as exc:
        raise CliError(f"bad sweep: {exc}", EXIT_CONFIG) from exc
    keys = list(sweep)
    write_summary(rows, out / "summary.csv", keys)
    for a in aggregate(rows, keys):
        point = " ".join(f"{k}={a[k]}" for k in keys)
        counts = " ".join(f"{o.value}={a[o.value]}" for o in Outcome)
        print(f"montecarlo: {point + ' ' if point else ''}runs={a['runs']} {counts} "
              f"success_rate={a['success_rate']:.3f}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uaav", description="Water-exit trajectory, control and simulation pipeline")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, traj=False, gains=False):
        p.add_argument("--config", default=None, help="YAML run configuration (defaults if omitted)")
        p.add_argument("--out", required=True, help="output directory")
        if traj:
            p.add_argument("--traj", required=True, help="trajectory CSV from 'optimize'")
        if gains:
            p.add_argument("--gains", required=True, help="gain schedule CSV from 'gains'")

    p = sub.add_parser("optimize", help="solve the multi-phase trajectory optimization")
    common(p)
    p.add_argument("--schedule", choices=sorted(SCHEDULES), default=None, help="mode schedule preset")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("gains", help="synthesize the hybrid TVLQR gain schedule")
    common(p, traj=True)
    p.set_defaults(func=cmd_gains)

    for name, func, help_ in (("simulate", cmd_simulate, "run one closed-loop simulation"),
                              ("montecarlo", cmd_montecarlo, "run a Monte-Carlo campaign")):
        p = sub.add_parser(name, help=help_)
        common(p, traj=True, gains=True)
        p.add_argument("--seed", type=int, default=None, help="random seed (first seed for montecarlo)")
        p.add_argument("--drag", type=float, default=None, help="drag multiplier applied to the plant")
        p.add_argument("--no-fallback", action="store_true", help="disable the time-invariant fallback")
        p.add_argument("--truth-feedback", action="store_true", help="feed the true state to the controller")
        if name == "montecarlo":
            p.add_argument("--runs", type=int, default=20, help="runs per sweep point")
            p.add_argument("--sweep", action="append", metavar="KEY=V1,V2",
                           help="sweep a sim setting (repeatable), e.g. drag=1.0,1.2")
        p.set_defaults(func=func)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
