"""Exception types shared across the package."""


class BamError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(BamError, ValueError):
    pass


class InconsistentGraphError(BamError, ValueError):
    """A partially directed graph already contains a directed cycle."""


class NotAnImmoralityError(BamError, ValueError):
    pass


class DegenerateColumnError(BamError, RuntimeError):
    """A simulated column has (numerically) zero variance."""


class ShapeMismatchError(BamError, ValueError):
    pass


class ConstraintViolationError(BamError, ValueError):
    pass


class NonFiniteError(BamError, FloatingPointError):
    def __init__(self, message, name=None):
        super().__init__(message)
        self.name = name


class NoPositivesError(BamError, ValueError):
    pass


class EigenConvergenceError(BamError, RuntimeError):
    pass


class CheckpointError(BamError, IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointLengthError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    def __init__(self, message, missing=(), extra=()):
        super().__init__(message)
        self.missing = list(missing)
        self.extra = list(extra)
