"""
Exception hierarchy for minflow.

The CLI maps these onto exit codes:
- InvalidInputError, InfeasibleError -> 2
- SolverFailureError -> 3
"""


class MinflowError(Exception):
    """Base class for every error raised by minflow."""


class InvalidInputError(MinflowError):
    """Input data violates a precondition (bad file, mismatched grids, mass imbalance...)."""


class InvalidParameterError(InvalidInputError):
    """A numeric parameter is out of range."""


class InfeasibleError(MinflowError):
    """The continuous problem has no solution (e.g. Neumann compatibility fails)."""


class SolverFailureError(MinflowError):
    """An iterative solver stopped without meeting its tolerance."""


class DegenerateDensityError(SolverFailureError):
    """Interpolated density too small to divide by; the input was not regularized."""
