"""Exception taxonomy shared across the package."""


class QuicError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(QuicError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class DataError(QuicError, ValueError):
    """Input values are malformed (NaN features, out-of-range labels, ...)."""


class ConfigError(QuicError, ValueError):
    """A configuration value or combination is invalid."""


class UsageError(QuicError, RuntimeError):
    """The API was called in an unsupported way."""


class FormatError(QuicError, ValueError):
    """A file does not conform to its on-disk format."""


class ResourceError(QuicError, RuntimeError):
    """An operation would exceed a configured resource cap."""


class DivergenceError(QuicError, RuntimeError):
    """Training produced non-finite values.

    Carries the last checkpoint taken before divergence, when available.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
