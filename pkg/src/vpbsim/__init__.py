"""Hermite-Fourier solver for the two-species Vlasov-Poisson-Boltzmann system in the diffusive scaling."""

__version__ = "0.1.0"

from .collision import (
    BGK,
    BOLTZMANN,
    CollisionOperator,
    KernelSpec,
    TransportCoefficients,
    assemble_boltzmann,
    bgk_operator,
    build_operator,
    cache_load,
    cache_store,
    transport_coefficients,
)
from .diagnostics import EnergyConstants, conservation_residuals, energy_functionals, energy_report, limit_deviation
from .errors import CacheError, NumericalAbort, ValidationError, VPBError
from .fluid_solver import FluidConfig, FluidSolver, FluidState
from .harness import ConvergenceResult, SweepConfig, run_sweep, selftest
from .kinetic_solver import KineticConfig, KineticSolver, Trajectory, well_prepared_initial
from .spatial import TorusGrid, poisson_solve
from .velocity_space import HermiteBasis, MacroState, TwoSpeciesDistribution, WeightSpec, fluid_moments, project_P

__all__ = [name for name in dir() if not name.startswith("_")]
