"""Hierarchical equations of motion for a Drude-Lorentz bath on every site."""

from ._backend import DEFAULT_BACKEND, KERNELS
from .hierarchy import CapacityError, Hierarchy, build_hierarchy, hierarchy_size
from .propagate import (
    ConvergenceError,
    ConvergenceResult,
    DivergenceError,
    HeomGenerator,
    LadderStep,
    PropagationConfig,
    SystemBathModel,
    Trajectory,
    converge,
    max_population_delta,
    propagate,
    propagate_from_site,
    site_state,
)

__all__ = [
    "DEFAULT_BACKEND", "KERNELS", "CapacityError", "Hierarchy", "build_hierarchy",
    "hierarchy_size", "ConvergenceError", "ConvergenceResult", "DivergenceError",
    "HeomGenerator", "LadderStep", "PropagationConfig", "SystemBathModel", "Trajectory",
    "converge", "max_population_delta", "propagate", "propagate_from_site", "site_state",
]
