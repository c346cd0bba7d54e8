"""Exception types shared across the package.

Each type maps to one CLI exit code: ConfigError -> 2, DataError -> 3,
NumericError -> 4, BlobIOError -> 5 (plain OSError also maps to 5).
"""


class ConfigError(ValueError):
    """Bad or unknown configuration key, value, or combination."""


class DataError(ValueError):
    """Input data violates a structural contract (shapes, labels, manifests)."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values or failed a numeric contract."""


class BlobIOError(OSError):
    """A binary blob is missing, truncated, or otherwise unreadable."""


class ShapeError(DataError):
    """Operands have incompatible shapes."""


class ContractError(RuntimeError):
    """An internal call contract was violated (programming error)."""
