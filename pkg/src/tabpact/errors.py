"""Exception types shared across the library."""


class TabpactError(Exception):
    """Base class for every error raised by this library."""


class ShapeError(TabpactError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(TabpactError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class TapeError(TabpactError, RuntimeError):
    """Gradient-tape misuse: detached tensor, repeated backward, ..."""


class EmbeddingIndexError(TabpactError, IndexError):
    """Embedding lookup index outside the table."""


class SchemaError(TabpactError, ValueError):
    """Input does not conform to the declared feature schema."""


class ConfigError(TabpactError, ValueError):
    """Invalid model, generator, or training configuration."""


class DataError(TabpactError, ValueError):
    """Malformed content in a data file; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NotFittedError(TabpactError, RuntimeError):
    """A preprocessor was applied before being fitted."""


class DivergenceError(TabpactError, RuntimeError):
    """Training produced a non-finite loss."""


class SearchError(TabpactError, RuntimeError):
    """Hyperparameter search finished without a usable result."""


class ComparisonError(TabpactError, ValueError):
    """Model comparison refused, e.g. metrics from different test splits."""
