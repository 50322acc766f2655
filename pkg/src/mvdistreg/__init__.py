"""Bayesian multivariate distributional regression with a Gaussian copula."""

from .margins import FAMILIES, get_family
from .copula import (
    CorrelationBundle,
    lambda_to_bundle,
    copula_log_density,
    spearman_rho,
    gaussianize,
    sample_joint,
)

__all__ = [
    "FAMILIES",
    "get_family",
    "CorrelationBundle",
    "lambda_to_bundle",
    "copula_log_density",
    "spearman_rho",
    "gaussianize",
    "sample_joint",
]

__version__ = "0.1.0"
