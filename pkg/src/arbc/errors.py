"""Exception hierarchy shared by every module."""


class ArbcError(Exception):
    """Base class for library errors."""


class DomainError(ArbcError, ValueError):
    """An argument lies outside the operation's domain."""


class ShapeError(ArbcError, ValueError):
    """Operands have mismatched index sets or dimensions."""


class InvalidPolicyError(ArbcError, ValueError):
    """A policy emitted a conditional that is not a distribution."""


class EnumerationTooLargeError(ArbcError):
    """Exact enumeration would exceed the configured table cap."""


class NumericCapError(ArbcError):
    """An iteration, Gram or sample budget cap was exceeded."""


class NumericError(ArbcError, FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


class MissingSideInformationError(ArbcError, ValueError):
    """Expert densities are required but absent from the dataset."""


class RatioUndefinedError(ArbcError, ValueError):
    """A density ratio has a zero denominator on observed data."""


class InsufficientDataError(ArbcError, ValueError):
    """Too few samples for the requested fold structure."""


class ProtocolViolationError(ArbcError):
    """An iterative learner returned an out-of-class conditional."""


class InfeasibleError(ArbcError):
    """A constraint set is empty or a precondition cannot be met."""


class ConfigError(ArbcError, ValueError):
    """Experiment configuration is malformed."""
