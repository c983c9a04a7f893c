"""Discrete stochastic heat equation / directed polymer lab for the 1-D KPZ equation."""

from .ensemble import EnsembleAccumulator, EnsembleConfig, EstimateWithError, run_ensemble
from .gaussian_env import GridSpec, RandomStream, make_stream, sample_replica
from .polymer import evolve_green, evolve_heights, quenched_density

__version__ = "0.1.0"

__all__ = [
    "EnsembleAccumulator", "EnsembleConfig", "EstimateWithError", "GridSpec", "RandomStream",
    "evolve_green", "evolve_heights", "make_stream", "quenched_density", "run_ensemble",
    "sample_replica",
]
