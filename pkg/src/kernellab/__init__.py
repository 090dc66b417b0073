"""kernellab: a numerical laboratory for perturbed transition densities.

Builds Gaussian and alpha-stable transition kernels, their potential
perturbations via the iterated Duhamel series, smallness certificates for
potentials, and verifies the resulting bounds and identities by
deterministic quadrature, exact combinatorics, and Monte Carlo over
Brownian bridges.
"""

from .errors import (
    ConfigError,
    DivergenceRiskError,
    InvalidPotentialError,
    KernelLabError,
    NumericalFailure,
    ResolutionError,
    SamplingFailureError,
    UnsupportedKernelError,
)
from .kernels import KernelSpec, density, gaussian, log_density, stable
from .quadrature import IntegralResult, QuadratureConfig

__all__ = [
    "ConfigError",
    "DivergenceRiskError",
    "IntegralResult",
    "InvalidPotentialError",
    "KernelLabError",
    "KernelSpec",
    "NumericalFailure",
    "QuadratureConfig",
    "ResolutionError",
    "SamplingFailureError",
    "UnsupportedKernelError",
    "density",
    "gaussian",
    "log_density",
    "stable",
]
