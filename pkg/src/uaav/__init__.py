"""Closed-loop water-to-air transition stack for a delta-wing aerial-aquatic vehicle."""

from .dynamics import Mode, PlanarState, ControlInput, VehicleParams

__all__ = ["Mode", "PlanarState", "ControlInput", "VehicleParams"]
__version__ = "0.1.0"
