from __future__ import annotations


class RiderError(Exception):
    """Base class for all errors raised by the rider package."""


class RiderValidationError(RiderError, ValueError):
    """Invalid input: a precondition or a domain invariant does not hold."""


class NumericalError(RiderError, ArithmeticError):
    """A computation failed numerically (singular system, no convergence, ...)."""


class NonStationaryProcessError(RiderValidationError):
    pass


class InfeasibleConstraintsError(RiderValidationError):
    pass


class DegenerateTestFunctionError(RiderValidationError):
    pass


class InsufficientHistoryError(RiderValidationError):
    pass


class PanelFormatError(RiderValidationError):
    """Raised while parsing a panel file; carries the offending row/column when known."""

    def __init__(self, message: str, *, row: int | None = None, column: str | None = None) -> None:
        super().__init__(message)
        self.row = row
        self.column = column


class SingularSystemError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass


class BacktestAbortedError(NumericalError):
    pass
