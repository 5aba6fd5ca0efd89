"""Truncated Euler-Maruyama schemes for stochastic differential equations
with time-varying delay."""

from .core import (
    ConfigurationError,
    DelayFunction,
    DomainError,
    InfeasibleParametersError,
    InitialPath,
    KhasminskiiConstants,
    PolicyError,
    SddeProblem,
    SplitSddeProblem,
    StabilityParams,
    TruncationPolicy,
    TruncEMError,
    power_policy,
)
from .brownian import BrownianGrid
from .solver import EnsembleMoments, PathOverflow, SolverConfig, Trajectory, run_ensemble, simulate
from .analysis import ConvergenceReport, RateSolution, strong_error

__version__ = "0.1.0"
