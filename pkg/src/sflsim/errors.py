"""Exception hierarchy shared across the simulator."""


class SflsimError(Exception):
    """Base class for all simulator errors."""


class ConfigError(SflsimError):
    """Invalid configuration, architecture text, or CLI arguments.

    ``field_path`` identifies the offending key (e.g. ``"schedule.batch"``
    or ``"toy.arch:4"``) when known.
    """

    def __init__(self, message: str, field_path: str | None = None):
        self.field_path = field_path
        if field_path:
            message = f"{field_path}: {message}"
        super().__init__(message)


class ShapeError(SflsimError):
    """Tensor shape incompatible with a layer or operation."""


class ProtocolOrderError(SflsimError):
    """An operation was invoked out of protocol order (e.g. backward
    without a cached forward, or a server step with missing messages)."""


class NumericsError(SflsimError):
    """A computation produced NaN or Inf."""


class PartitionError(SflsimError):
    """Dataset cannot be partitioned under the requested constraints."""


class DataError(SflsimError):
    """Base class for dataset loading failures."""


class BadMagicError(DataError):
    """A binary file does not start with the expected magic number."""


class TruncatedFileError(DataError):
    """A binary file ends before its declared payload."""


class CountMismatchError(DataError):
    """Image and label files declare different sample counts."""
