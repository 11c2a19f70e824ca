"""Excursion sets, contour uncertainty regions and joint Gaussian box
probabilities for latent Gaussian fields."""

from .excursions import (
    ExcursionProblem,
    ExcursionResult,
    excursion,
    excursion_one_param,
    excursion_two_param,
    level_avoid,
    set_from_function,
)
from .families import Family
from .gauss_prob import Bounds, IntegrationConfig, ghk_probability, mc_bruteforce, qmc_genz
from .gmrf import GaussianPosterior, NotPositiveDefinite, cholesky
from .posterior_methods import ParamConfig, ParamConfigSet, run_method

__all__ = [
    "Bounds",
    "ExcursionProblem",
    "ExcursionResult",
    "Family",
    "GaussianPosterior",
    "IntegrationConfig",
    "NotPositiveDefinite",
    "ParamConfig",
    "ParamConfigSet",
    "cholesky",
    "excursion",
    "excursion_one_param",
    "excursion_two_param",
    "ghk_probability",
    "level_avoid",
    "mc_bruteforce",
    "qmc_genz",
    "run_method",
    "set_from_function",
]
