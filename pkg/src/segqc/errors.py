"""Exception hierarchy. The CLI maps each family onto an exit code."""


class SegQCError(Exception):
    """Base class for all package errors."""


class ConfigError(SegQCError):
    """Bad or unknown configuration keys/values."""


class DataError(SegQCError):
    """Invalid input data: bad files, labels, shapes or unbalanceable scores."""


class InvalidLabelError(DataError):
    pass


class ShapeMismatchError(DataError, ValueError):
    pass


class FormatError(DataError):
    """A case file does not follow the portable header+raw format."""


class ModeError(DataError, ValueError):
    pass


class BalanceError(DataError):
    """Some DSC bin is empty, so score balancing is infeasible."""

    def __init__(self, empty_bins):
        self.empty_bins = list(empty_bins)
        super().__init__(f"cannot balance scores: empty bins {self.empty_bins}")


class NumericError(SegQCError):
    """Non-finite loss or gradient."""
