"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericAbort -> 4.
"""


class ShapeError(ValueError):
    """Operands have incompatible or invalid dimensions."""


class ConfigError(ValueError):
    """A configuration value or document is invalid."""


class DataError(ValueError):
    """A data file or dataset is malformed or unusable."""


class StateError(RuntimeError):
    """An operation was called in a mode its state does not support."""


class NumericAbort(RuntimeError):
    """Training produced non-finite values and cannot continue."""

    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message)
        self.layer = layer
