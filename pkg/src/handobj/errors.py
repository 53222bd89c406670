"""Exception types shared across the package."""


class HandObjError(Exception):
    """Base class for all package errors."""


class DegenerateConfiguration(HandObjError):
    """Input geometry is rank-deficient for the requested operation."""


class DimensionMismatch(HandObjError, ValueError):
    pass


class NotNormalized(HandObjError, ValueError):
    pass


class EmptyEnsemble(HandObjError, ValueError):
    pass


class NotConverged(HandObjError):
    """Iterative solver hit its iteration cap.

    The best pose found so far and its residual are attached so callers can
    decide whether to use it anyway.
    """

    def __init__(self, message, pose=None, residual=None):
        super().__init__(message)
        self.pose = pose
        self.residual = residual
