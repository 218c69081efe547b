"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 2, data problems 3,
capability/backend problems 4.
"""


class TextSegError(Exception):
    exit_code = 1


class ArgumentError(TextSegError, ValueError):
    exit_code = 2


class ConfigurationError(TextSegError, ValueError):
    exit_code = 2


class ShapeError(TextSegError, ValueError):
    exit_code = 3


class FormatError(TextSegError, ValueError):
    exit_code = 3


class DataError(TextSegError):
    exit_code = 3


class NumericError(TextSegError, FloatingPointError):
    exit_code = 3


class TokenOverflowError(ArgumentError):
    """Text does not fit into the backend context length."""


class CapabilityError(TextSegError):
    exit_code = 4


class BackendMismatchError(CapabilityError):
    """A persisted bank was built against a different backend."""


class TrainingDiverged(NumericError):
    """Raised when the loss turns non-finite; carries the last good bank."""

    def __init__(self, message, last_good=None, epoch=None):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


class EmptyForegroundWarning(UserWarning):
    pass
