"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: ``DataFormatError`` and ``CheckpointError``
become exit code 2, ``NumericError`` becomes exit code 3.
"""


class VitaeError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(VitaeError, ValueError):
    """Operand extents are incompatible."""


class GradientError(VitaeError, RuntimeError):
    """Misuse of the autodiff tape (non-scalar loss, detached loss, repeated backward)."""


class ConfigError(VitaeError, ValueError):
    """A model configuration is malformed or violates an invariant."""


class NumericError(VitaeError, ArithmeticError):
    """Non-finite loss or a failed gradient check."""


class DataFormatError(VitaeError, ValueError):
    """A dataset file is malformed."""


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class CheckpointError(VitaeError, ValueError):
    """A checkpoint file cannot be read or written."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointLengthError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class DuplicateNameError(CheckpointError):
    pass
