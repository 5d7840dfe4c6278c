"""Exception hierarchy shared across the package.

Every error raised by library code derives from StfError so callers (and the
CLI exit-code mapping) can distinguish our failures from programming errors.
"""


class StfError(Exception):
    """Base class for all library errors."""


class TopologyError(StfError):
    """Skeleton graph is malformed: bad edge indices, disconnected, etc."""


class ShapeError(StfError):
    """Tensor extents are incompatible with the requested operation."""


class ConfigError(StfError):
    """Invalid architecture or run configuration."""


class DataError(StfError):
    """Malformed or inconsistent data file / label / sequence."""


class ContractError(StfError):
    """An API precondition was violated (non-scalar loss, mismatched lists)."""


class NumericError(StfError):
    """Non-finite values showed up where finite ones were required."""


class UnsupportedOperationError(StfError):
    """The requested operation is not available for this model/checkpoint."""
