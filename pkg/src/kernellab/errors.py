"""Exception taxonomy shared by all kernellab modules."""


class KernelLabError(Exception):
    """Base class for all kernellab errors."""


class UnsupportedKernelError(KernelLabError):
    """Requested (family, dimension, alpha) combination is not supported."""


class NumericalFailure(KernelLabError):
    """A quadrature or inversion did not reach the requested accuracy.

    Carries the best value obtained and the achieved error estimate so
    callers can decide whether the partial result is still usable.
    """

    def __init__(self, message, value=None, error_estimate=None):
        super().__init__(message)
        self.value = value
        self.error_estimate = error_estimate


class DivergenceRiskError(KernelLabError):
    """Series summation refused: the smallness certificate does not
    guarantee convergence at the requested tolerance."""


class InvalidPotentialError(KernelLabError):
    """Potential evaluated to a non-finite value on the quadrature lattice."""


class SamplingFailureError(KernelLabError):
    """Monte Carlo path rejection rate exceeded the allowed budget."""


class ResolutionError(KernelLabError):
    """Spectral grid too coarse: significant energy in the top octave."""


class ConfigError(KernelLabError):
    """Experiment configuration is syntactically or semantically invalid."""

    def __init__(self, message, line=None, column=None):
        if line is not None:
            message = f"line {line}" + (f", col {column}" if column is not None else "") + f": {message}"
        super().__init__(message)
        self.line = line
        self.column = column
