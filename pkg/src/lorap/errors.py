"""Exception taxonomy shared across the package."""


class LorapError(Exception):
    """Base class for all domain errors raised by this package."""


class InputError(LorapError):
    """Invalid argument values or incompatible shapes."""


class ParseError(InputError):
    """Malformed text input; carries the offending line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(LorapError):
    """Bad configuration key or value; names the key."""


class StateError(LorapError):
    """Operation called out of order (e.g. backward without a forward tape)."""


class PlanError(LorapError):
    """Kernel plan constraints violated (scratch sizing, accumulator overflow)."""


class TrainingError(LorapError):
    """Training diverged; carries the epoch at which the loss became non-finite."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class NumericalError(LorapError):
    """A numerical routine failed to converge or produced non-finite values."""
