"""Exception types raised across the package.

Each class also derives from the closest builtin so callers that only know
about ``ValueError``/``KeyError`` keep working.
"""


class ShapeError(ValueError):
    """Array shapes do not agree with what an operation requires."""


class NumericInputError(ValueError):
    """Input contains NaN or infinite values."""


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BranchError(KeyError):
    """A control branch was requested that is not attached to the model."""

    def __str__(self):
        return str(self.args[0]) if self.args else "unknown branch"


class DataError(ValueError):
    """Dataset or evaluation set is empty or otherwise unusable."""


class StateError(RuntimeError):
    """An operation was called before its prerequisites exist."""


class NumericFailure(ArithmeticError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message, step=None, batch_seed=None):
        super().__init__(f"{message} [step={step}, batch_seed={batch_seed}]")
        self.step = step
        self.batch_seed = batch_seed


class UndefinedMetricError(ValueError):
    """A metric's reference quantity is zero, so the ratio has no value."""
