"""Exception types shared across the package.

The CLI maps each family onto an exit code, so every error raised by the
library derives from one of the four roots below.
"""


class CLQError(Exception):
    """Base class for all library errors."""


class ConfigurationError(CLQError, ValueError):
    """Invalid shapes, dimensions, bit-widths or option combinations."""


class DataError(CLQError, ValueError):
    """Input data that cannot be processed (NaN/Inf, empty batches)."""


class FormatError(CLQError):
    """Corrupt or inconsistent on-disk payloads."""


class SearchFailure(CLQError):
    """No usable candidate in a clipping-range search."""


class UnsupportedPackingError(ConfigurationError):
    pass


class SequencingError(ConfigurationError):
    """Cross-block calibration requested out of block order."""


class ResourceError(ConfigurationError):
    pass
