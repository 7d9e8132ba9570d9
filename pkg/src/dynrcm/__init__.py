"""Simulation and numerical diagnostics for one-dimensional random walks
among time-dependent random conductances."""

from .env import (DynamicConductanceField, Edge, EnvironmentModel, Marginal, build_environment,
                  constant_field, load_field, periodic_static_field, save_field, slab_field)
from .errors import ConsistencyError, ExplosionError, ParameterError, SolverError
from .walk import PathSample, WalkerConfig, simulate, simulate_positions
from .corrector import (HarmonicTable, solve, solve_dynamic, solve_static, sublinearity_profile,
                        variance_formula)

__version__ = "0.1.0"

__all__ = [
    "DynamicConductanceField", "Edge", "EnvironmentModel", "Marginal", "build_environment",
    "constant_field", "load_field", "periodic_static_field", "save_field", "slab_field",
    "ConsistencyError", "ExplosionError", "ParameterError", "SolverError",
    "PathSample", "WalkerConfig", "simulate", "simulate_positions",
    "HarmonicTable", "solve", "solve_dynamic", "solve_static", "sublinearity_profile",
    "variance_formula",
]
