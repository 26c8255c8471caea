"""Exception types raised across the package."""


class CrtError(Exception):
    """Base class for all package errors."""


class InvalidShapeError(CrtError, ValueError):
    pass


class InvalidGroupsError(CrtError, ValueError):
    pass


class InvalidArgumentError(CrtError, ValueError):
    pass


class InvalidInputError(CrtError, ValueError):
    pass


class InvalidCodebookError(CrtError, ValueError):
    pass


class InvalidPyramidError(CrtError, ValueError):
    pass


class InvalidInputSizeError(CrtError, ValueError):
    pass


class InvalidBoxError(CrtError, ValueError):
    pass


class CheckpointError(CrtError, ValueError):
    pass


class NonFiniteError(CrtError, FloatingPointError):
    """A forward or backward value became NaN/inf; message names the operation."""


class TrainingError(CrtError, RuntimeError):
    pass
