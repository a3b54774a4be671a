"""Exception hierarchy.

The three branches map onto the CLI exit codes: ParameterError -> 1
(usage), DataError -> 2 (bad or inconsistent data), NumericalError -> 3
(solver / eigensolver failure).
"""


class VesselflowError(Exception):
    """Base class for all package errors."""


class ParameterError(VesselflowError):
    """An argument is outside its documented range or malformed."""


class DataError(VesselflowError):
    """Input data is missing, inconsistent, or degenerate."""


class OutOfDomainError(DataError):
    """A sampling position lies outside the grid bounding box."""


class DegenerateHistogramError(DataError):
    """Thresholding was asked for on a constant image."""


class NumericalError(VesselflowError):
    """A numerical procedure failed to produce a usable result."""


class ConvergenceError(NumericalError):
    """An iterative solver exhausted its budget. Carries the residual."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class DegenerateSpectrumError(NumericalError):
    """Spectrum fitting was asked for on an all-zero spectrum."""
