class ProMLError(Exception):
    exit_code = 1


class DataError(ProMLError, ValueError):
    """Input data cannot satisfy the requested operation."""

    exit_code = 2


class InsufficientDataError(DataError):
    def __init__(self, label: str, found: int, needed: int):
        super().__init__(f"insufficient data for label {label!r}: found {found} mentions, need {needed}")
        self.label = label


class NumericError(ProMLError, ArithmeticError):
    exit_code = 3
