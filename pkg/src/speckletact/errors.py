"""Exception hierarchy. Each class carries the CLI exit code and a short machine code."""


class SpeckletactError(Exception):
    code = "error"
    exit_code = 1


class InvalidArgument(SpeckletactError, ValueError):
    code = "invalid-argument"
    exit_code = 2


class InvalidGeometry(InvalidArgument):
    code = "invalid-geometry"


class ShapeError(InvalidArgument):
    code = "shape-error"


class UndefinedContrast(SpeckletactError, ValueError):
    code = "undefined-contrast"
    exit_code = 4


class FormatError(SpeckletactError):
    code = "format-error"
    exit_code = 3


class CorruptDataset(SpeckletactError):
    code = "corrupt-dataset"
    exit_code = 3


class NumericFailure(SpeckletactError, FloatingPointError):
    code = "numeric-failure"
    exit_code = 4
