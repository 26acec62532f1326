"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: bad usage is argparse's problem (exit 2),
``DataError`` and subclasses exit 3, ``NumericError`` exits 4.
"""


class ShapeError(ValueError):
    """Operands with incompatible dimensions."""


class NumericError(FloatingPointError):
    """A computation produced or encountered non-finite values."""


class DataError(ValueError):
    """Malformed or insufficient input data (files, pools, schemas)."""


class FormatError(DataError):
    """A binary or JSON container violates its declared format."""
