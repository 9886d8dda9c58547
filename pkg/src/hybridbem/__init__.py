"""Backward Euler-Maruyama for SDEs with Markovian switching."""

__version__ = "0.1.0"

from .bem import SolverOptions, StepProblem, implicit_step
from .markov_chain import (
    couple_chains,
    sample_chain,
    stationary_distribution,
    transition_matrix,
    validate_generator,
)
from .model import ModelConstants, PolynomialModel, two_regime_cubic
from .simulator import coupled_ensemble, ensemble_snapshots, simulate, simulate_coupled

__all__ = [
    "SolverOptions", "StepProblem", "implicit_step",
    "couple_chains", "sample_chain", "stationary_distribution", "transition_matrix", "validate_generator",
    "ModelConstants", "PolynomialModel", "two_regime_cubic",
    "coupled_ensemble", "ensemble_snapshots", "simulate", "simulate_coupled",
]
