"""Error taxonomy shared across the package.

The command-line driver maps these onto process exit codes:
ValidationError -> 1, NumericalError -> 2, AssertionError -> 3.
"""

from __future__ import annotations


class ValidationError(ValueError):
    """Bad inputs, bad configuration, or violated preconditions."""


class ShapeError(ValidationError):
    """Operand shapes do not line up."""


class NumericalError(ArithmeticError):
    """Non-finite values or failed numerical contracts at run time."""
