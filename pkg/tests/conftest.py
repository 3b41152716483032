"""Shared fixtures.

The water-exit trajectory and its gain schedule take about half a minute to
produce, so they are built once per session through the command-line entry
point and shared by every test that needs them.
"""

from __future__ import annotations

import time
from pathlib import Path

import pytest

from uaav.cli import main
from uaav.control import GainSchedule
from uaav.dynamics import VehicleParams
from uaav.trajopt import NominalTrajectory

ROOT = Path(__file__).resolve().parents[1]
NOMINAL_CONFIG = ROOT / "configs" / "nominal.yaml"

# acceptance verdicts, printed together at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def params() -> VehicleParams:
    return VehicleParams()


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """Run ``optimize`` and ``gains`` once; return a dict of output paths."""
    base = tmp_path_factory.mktemp("pipeline")
    traj_dir, gains_dir = base / "traj", base / "gains"
    start = time.perf_counter()
    assert main(["optimize", "--out", str(traj_dir)]) == 0
    optimize_seconds = time.perf_counter() - start
    assert main(["gains", "--traj", str(traj_dir / "trajectory.csv"), "--out", str(gains_dir)]) == 0
    return {"base": base, "traj_dir": traj_dir, "traj": traj_dir / "trajectory.csv",
            "report": traj_dir / "solver_report.yaml", "gains": gains_dir / "gains.csv",
            "gains_dir": gains_dir, "optimize_seconds": optimize_seconds}


@pytest.fixture(scope="session")
def traj(pipeline, params) -> NominalTrajectory:
    return NominalTrajectory.from_csv(pipeline["traj"], params)


@pytest.fixture(scope="session")
def gains(pipeline) -> GainSchedule:
    return GainSchedule.from_csv(pipeline["gains"])
