"""Exception hierarchy.

Input problems (bad files, schema violations) raise ``DataValidationError``;
failures of the numerical machinery raise subclasses of ``NumericalError``.
The CLI maps the former to exit code 2 and the latter to exit code 1.
"""


class AggcateError(Exception):
    """Base class for all package errors."""


class DataValidationError(AggcateError):
    """Invalid or inconsistent input data."""


class NumericalError(AggcateError):
    """A numerical procedure failed."""


class InfeasibleMomentsError(NumericalError):
    """Target moments lie outside the achievable set of the base sample.

    Carries per-moment hull diagnostics in ``diagnostics`` when available:
    a list of (label, base_min, target, base_max) tuples.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


class MaxIterationsError(NumericalError):
    """An iterative solver exhausted its iteration budget."""


class RankDeficiencyError(NumericalError):
    """The moment Jacobian is numerically rank deficient."""


class EmptyStratumError(NumericalError):
    """No base-sample row falls in a reported subgroup stratum."""
