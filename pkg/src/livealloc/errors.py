"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: usage errors exit 1, data
errors exit 2, numeric faults exit 3.
"""


class AllocError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(AllocError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(AllocError):
    """A configuration value is out of its legal range."""


class RoutingError(AllocError):
    """A group id falls outside the configured [0, K) range."""


class NumericFault(AllocError):
    """A NaN/Inf showed up where only finite values are allowed."""


class DataError(AllocError):
    """A logged record violates the dataset contract (e.g. zero propensity)."""


class ContractError(AllocError):
    """A caller violated an internal API precondition."""
