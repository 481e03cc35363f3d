"""Exception types shared across the toolkit."""


class QtkError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(QtkError):
    """Tensor shapes are incompatible with the requested operation."""


class FormatError(QtkError):
    """A file or serialized object failed to parse or validate."""


class DegenerateInputError(QtkError):
    """Input carries no usable information (all-zero tensor, empty dataset)."""
