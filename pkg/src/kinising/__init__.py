"""Continuous-time kinetic Ising models: simulation and latent-variable inference."""

from .errors import NumericalError, ValidationError
from .model import (
    IntervalTable,
    IsingModel,
    SpinTrajectory,
    build_interval_table,
    discrete_log_prob,
    flip_probability,
    iter_interval_tables,
    log_likelihood,
)

__version__ = "0.1.0"

__all__ = [
    "IntervalTable",
    "IsingModel",
    "NumericalError",
    "SpinTrajectory",
    "ValidationError",
    "build_interval_table",
    "discrete_log_prob",
    "flip_probability",
    "iter_interval_tables",
    "log_likelihood",
]
