"""Exception types shared across modules."""


class IetAgcError(Exception):
    """Base class for package errors."""


class ConfigError(IetAgcError, ValueError):
    """Invalid configuration or precondition violation."""


class ShapeError(IetAgcError, ValueError):
    """Dimension or architecture mismatch."""


class FormatError(IetAgcError, ValueError):
    """Corrupt, truncated, or unsupported file."""


class NumericalError(IetAgcError, ArithmeticError):
    """A numerical routine could not meet its accuracy contract."""


class TrainingDiverged(IetAgcError, FloatingPointError):
    """Non-finite loss or gradient during training.

    ``last_good`` is the last completed epoch and ``params`` the model at
    its end (the start of the failing epoch), when known.
    """

    def __init__(self, message, epoch=None, last_good=None, params=None):
        super().__init__(message)
        self.epoch = epoch
        self.last_good = last_good
        self.params = params


class IncompatibleArtifacts(IetAgcError):
    """Checkpoint and dataset disagree on dimension or horizon."""
