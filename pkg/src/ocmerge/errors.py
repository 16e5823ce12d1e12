"""Exception hierarchy shared by every module.

The CLI maps these to exit codes, so new error types must subclass one of
the three families below.
"""


class OCMergeError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(OCMergeError):
    exit_code = 2


class IOFailure(OCMergeError):
    exit_code = 3


class NumericalError(OCMergeError):
    exit_code = 4


class ShapeError(ConfigError, ValueError):
    """Operands have incompatible shapes."""


class IncompatibleCheckpoints(ShapeError):
    pass


class UnknownTask(ConfigError, KeyError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message: str, iterations: int):
        super().__init__(message)
        self.iterations = iterations


class DegenerateMergeError(NumericalError):
    pass


class EmptyMergeError(NumericalError):
    pass


class InfeasibleGeometry(ConfigError):
    """Requested prompt similarities do not form a valid Gram matrix."""


class CheckpointFormatError(IOFailure):
    pass


class BadMagic(CheckpointFormatError):
    pass


class VersionMismatch(CheckpointFormatError):
    pass


class TruncatedPayload(CheckpointFormatError):
    pass
