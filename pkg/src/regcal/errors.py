"""Exception hierarchy shared by all regcal modules."""

from __future__ import annotations


class RegcalError(Exception):
    """Base class for every error raised by this package."""


class NotPositiveDefinite(RegcalError):
    pass


class RankDeficient(RegcalError):
    pass


class EmptyInput(RegcalError):
    pass


class DimensionMismatch(RegcalError, ValueError):
    pass


class UnknownScenario(RegcalError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


class InvalidConfig(RegcalError, ValueError):
    pass


class NegativeErrorVariance(InvalidConfig):
    pass


class NonPositiveRate(RegcalError):
    pass


class NoBracket(RegcalError):
    pass


class SchemaError(RegcalError, ValueError):
    """A CSV or analysis spec is missing a column or has a malformed value."""

    def __init__(self, message: str, column: str | None = None):
        super().__init__(message)
        self.column = column


class TooFewRows(RegcalError):
    pass


class ExcessiveMissingness(RegcalError):
    pass


class InvalidIcc(RegcalError, ValueError):
    pass


class NotNested(RegcalError):
    pass


class DegenerateResample(RegcalError):
    pass


class Separation(RegcalError):
    """Monotone partial likelihood: some coefficient diverges."""


class MissingFit(RegcalError):
    pass


class EmptyAnalysisSet(RegcalError):
    pass


class TooManyFailedReplicates(RegcalError):
    pass


class SingularCovariance(RegcalError):
    pass


class NoSuccessfulRecords(RegcalError):
    pass


class DegenerateVariance(RegcalError):
    pass


class NonPositiveValues(RegcalError, ValueError):
    pass
