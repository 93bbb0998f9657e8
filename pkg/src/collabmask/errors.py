"""Exception hierarchy shared across the package.

The CLI maps each family to a process exit code, so every error raised on a
user-facing path should derive from one of the classes below.
"""


class CollabMaskError(Exception):
    exit_code = 1


class ConfigError(CollabMaskError, ValueError):
    exit_code = 2


class DimensionError(CollabMaskError, ValueError):
    exit_code = 2


class ContractError(CollabMaskError, RuntimeError):
    exit_code = 2


class DataError(CollabMaskError, IOError):
    exit_code = 3
    code = "data"


class BadMagicError(DataError):
    code = "bad_magic"


class TruncatedFileError(DataError):
    code = "truncated"


class EmptyDatasetError(DataError):
    code = "empty"


class IndivisibleDimsError(DataError):
    code = "indivisible_dims"


class CompatibilityError(DataError):
    """Checkpoint does not match the model/config it is being loaded into."""

    code = "incompatible"


class NonFiniteError(CollabMaskError, FloatingPointError):
    exit_code = 4
