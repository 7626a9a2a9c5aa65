"""Synthetic power-grid operating states via physics-guided diffusion sampling."""

__version__ = "0.1.0"

from .grid import GridCase, load_bundled_case, parse_case
from .powerflow import (
    PFSolution,
    ResidualReport,
    StateVector,
    newton_raphson,
    project_to_feasible,
    residual_penalties,
)

__all__ = [
    "__version__",
    "GridCase",
    "parse_case",
    "load_bundled_case",
    "StateVector",
    "PFSolution",
    "ResidualReport",
    "newton_raphson",
    "project_to_feasible",
    "residual_penalties",
]
