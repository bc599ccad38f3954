"""Exception hierarchy.

Input problems derive from :class:`InputError` (CLI exit code 2), numerical
failures from :class:`NumericError` (exit code 3).
"""


class PMSlamError(Exception):
    pass


class InputError(PMSlamError, ValueError):
    pass


class NumericError(PMSlamError, ArithmeticError):
    pass


class ShapeError(InputError):
    pass


class InvalidIntrinsicsError(InputError):
    pass


class EmptyInputError(InputError):
    pass


class DegenerateConfigurationError(NumericError):
    pass


class InsufficientCorrespondencesError(InputError):
    pass


class PoseFailureError(NumericError):
    pass


class EmptySupportError(InputError):
    pass


class EmptyWindowError(InputError):
    pass


class DegenerateScaleError(NumericError):
    pass


class EmptySupervisionError(InputError):
    pass


class EmptyBufferError(InputError):
    pass


class EmptyReferenceError(InputError):
    pass


class TooFewFramesError(InputError):
    pass


class InvalidEpsilonError(InputError):
    pass


class ConfigError(InputError):
    pass


class DatasetError(InputError):
    """Malformed or missing dataset file; carries the path and byte offset."""

    def __init__(self, path, message, offset=None):
        self.path = str(path)
        self.offset = offset
        where = self.path if offset is None else f"{self.path} @ byte {offset}"
        super().__init__(f"{where}: {message}")


class UnsupportedEndiannessError(DatasetError):
    pass


class StageError(PMSlamError):
    """Pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
