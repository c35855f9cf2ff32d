"""Exception types shared across the package."""


class MeldError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(MeldError, ValueError):
    """A configuration value is missing, malformed or inconsistent."""


class EmptyInputError(MeldError, ValueError):
    """An operation received an input with nothing to process."""


class ShapeError(MeldError, ValueError):
    """Array or tensor dimensions do not line up."""


class CheckpointError(MeldError):
    """A checkpoint or container file cannot be used as requested."""


class NonFiniteLossError(MeldError, FloatingPointError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, message, batch_id=None, report=None):
        super().__init__(message)
        self.batch_id = batch_id
        self.report = report
