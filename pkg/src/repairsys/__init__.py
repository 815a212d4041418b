"""Simulation and repair-rate control of a three-state repairable system."""

__version__ = "0.1.0"

from .model import (
    Grid,
    ModelParams,
    RepairRateSpec,
    SurvivalCurve,
    SystemState,
    availability,
    cfg_a,
    dist_x,
    marginals,
    norm_x,
    pulse_state,
    survival,
)

__all__ = [
    "Grid",
    "ModelParams",
    "RepairRateSpec",
    "SurvivalCurve",
    "SystemState",
    "availability",
    "cfg_a",
    "dist_x",
    "marginals",
    "norm_x",
    "pulse_state",
    "survival",
    "__version__",
]
