"""Numerical laboratory for coupled forward-backward stochastic functional
differential equations: memory-dependent forward simulation, regression
Monte Carlo for anticipated backward equations, Picard/continuation solution
of the coupled system, and a quadratic optimal control application."""

from .kernel import (
    BrownianEnsemble,
    ProcessEnsemble,
    TimeGrid,
    WeightedNormSpec,
    build_time_grid,
    sample_brownian,
    theta_star,
    weighted_l2_norm,
)

__all__ = [
    "BrownianEnsemble",
    "ProcessEnsemble",
    "TimeGrid",
    "WeightedNormSpec",
    "build_time_grid",
    "sample_brownian",
    "theta_star",
    "weighted_l2_norm",
]

__version__ = "0.1.0"
