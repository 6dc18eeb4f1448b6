"""Exception hierarchy shared by every hapkit module."""


class HapError(Exception):
    """Base class for all hapkit errors."""


class ShapeError(HapError, ValueError):
    """Array or layer shapes are incompatible."""


class NonFiniteError(HapError, FloatingPointError):
    """A NaN or Inf appeared in a computed value."""


class SpecError(HapError, ValueError):
    """A model specification is invalid."""


class PlanError(HapError, ValueError):
    """A prune plan cannot be applied to a model."""


class InfeasiblePlanError(HapError):
    """No plan satisfies the requested budget under the active constraints.

    Attributes:
        constraint: name of the binding constraint.
    """

    def __init__(self, message, constraint):
        super().__init__(message)
        self.constraint = constraint


class CheckpointError(HapError):
    """Checkpoint payload is corrupt or truncated."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an unsupported format version."""


class SingularMatrixError(HapError, ArithmeticError):
    """A Hessian block that must be inverted is (numerically) singular."""


class CapacityError(HapError):
    """A request exceeds a configured size cap (dense Hessian, enumeration)."""


class DatasetFormatError(HapError, ValueError):
    """A dataset file is malformed."""


class ConfigError(HapError, ValueError):
    """Configuration is missing values or holds invalid ones."""


class TrainingDivergedError(NonFiniteError):
    """Training produced a non-finite loss."""


class MissingTraceError(HapError, KeyError):
    """A group has no trace estimate to score with."""
