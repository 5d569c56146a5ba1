"""Exception types shared across the toolkit.

Every checked failure mode gets its own class so callers (and the CLI's
exit-code mapping) can tell configuration mistakes apart from runtime
failures.
"""


class GridcastError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(GridcastError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(GridcastError):
    """A configuration value is invalid or inconsistent."""


class ContractError(GridcastError):
    """An operation was called outside its stated contract."""


class StateError(GridcastError):
    """An object is in the wrong state for the requested action."""


class GapError(GridcastError):
    """Required data is entirely missing (e.g. a frame with no met stations)."""


class IntegrityError(GridcastError):
    """A file failed a structural or checksum validation."""


class NonFiniteError(GridcastError):
    """A tensor contains NaN or Inf where finite values are required."""


class TrainingAborted(GridcastError):
    """Training stopped because the loss or a parameter went non-finite."""
