"""Exception hierarchy shared across the package.

The CLI maps :class:`DataError` to exit code 1 and :class:`ContractError`
to exit code 2.
"""


class BMQAError(Exception):
    """Base class for every error raised by this package."""


class DataError(BMQAError):
    """Bad input data: malformed records, out-of-range values, empty splits."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(DataError):
    """A file does not follow its binary or text format."""


class EmptyInputError(DataError):
    """An input had nothing to work with after normalization."""


class ContractError(BMQAError):
    """A caller violated a precondition of an operation."""


class ShapeError(ContractError):
    """Tensor or image extents do not agree."""


class DegenerateInputError(ContractError):
    """Input for which the quantity is mathematically undefined."""


class ConfigError(ContractError):
    """Invalid or incomplete configuration."""


class NonFiniteError(BMQAError):
    """A forward computation or loss produced NaN or Inf."""
