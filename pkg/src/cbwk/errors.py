"""Exception types shared across the package."""


class CbwkError(Exception):
    """Base class for all package errors."""


class MissingField(CbwkError):
    """A required field is absent from a configuration document."""


class NormViolation(CbwkError):
    """A feature vector exceeds the unit Euclidean norm."""


class RangeViolation(CbwkError):
    """A reward or cost entry lies outside [0, 1]."""


class NullActionNonzero(CbwkError):
    """The no-op action carries a nonzero reward or cost."""


class MissingDistribution(CbwkError):
    """A context distribution is required but the spec does not define one."""


class NullActionConversion(CbwkError):
    """A conversion was requested for the no-op action, which has none."""


class HorizonExceeded(CbwkError):
    """More rounds were played than the declared horizon."""


class NoConvergence(CbwkError):
    """An iterative solver hit its iteration cap before reaching tolerance."""


class NumericalInstability(CbwkError):
    """The linear-program solver could not pivot reliably."""


class TooLarge(CbwkError):
    """A brute-force oracle was asked to enumerate too many variables."""


class SchemaError(CbwkError):
    """An ingested data file does not match the declared schema."""


class EmptyAfterFiltering(CbwkError):
    """Every ingested row was rejected by the range filters."""


class CoefficientMismatch(CbwkError):
    """A coefficient table does not cover the declared feature levels."""
