"""Exception types shared across the package."""


class ParseError(ValueError):
    """Malformed input file. ``row`` is 1-based."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""
