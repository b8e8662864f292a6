"""Exception types shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific type that applies rather than bare ValueError.
"""


class MotionMixError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(MotionMixError, ValueError):
    """Shapes or widths of inputs do not line up."""


class DomainError(MotionMixError, ValueError):
    """An argument is outside the domain an operation is defined on."""


class ValidationError(MotionMixError, ValueError):
    """A scenario, config or file violates a structural invariant."""


class ParseError(ValidationError):
    """A file could not be parsed; message names the file and location."""


class NumericError(MotionMixError, ArithmeticError):
    """A NaN/Inf or diverging quantity was produced where finite values are required."""


# process exit codes used by the CLI
EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3
EXIT_IO = 4
