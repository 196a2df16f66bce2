"""Exception types shared across the package."""


class GridFlowError(Exception):
    """Base class for all gridflow errors."""


class ValidationError(GridFlowError, ValueError):
    """Invalid input data or parameters (shape, range, direction, finiteness)."""


class EstimationError(GridFlowError, RuntimeError):
    """Estimation cannot proceed (degenerate correspondences, no valid cells)."""


class NumericalError(GridFlowError, ArithmeticError):
    """A computation produced non-finite values; the message names the term."""


class FormatError(GridFlowError, ValueError):
    """Malformed binary file. ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
