"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, IOFormatError -> 3,
NumericalError -> 4, CheckFailure -> 5.
"""


class ConfigError(ValueError):
    """Bad configuration: unknown keys, out-of-range values, degenerate setups."""


class IOFormatError(IOError):
    """Malformed or unsupported file content (PFM/PGM/PPM/checkpoint)."""


class NumericalError(ArithmeticError):
    """NaN/Inf detected where finite values are guaranteed."""


class CheckFailure(AssertionError):
    """A gradcheck / oracle-check self-test did not meet its tolerance."""


class ShapeError(ValueError):
    """Tensor/array shape mismatch for an operation."""
