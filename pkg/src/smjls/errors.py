"""Exception hierarchy shared by all modules.

The CLI maps these onto process exit codes: ``ValidationError`` -> 2,
``NumericError`` -> 3.
"""


class SMJLSError(Exception):
    """Base class for package errors."""


class ValidationError(SMJLSError, ValueError):
    """Input violates a documented precondition or invariant."""


class DomainError(ValidationError):
    """Argument outside the mathematical domain of an operation."""


class NumericError(SMJLSError, ArithmeticError):
    """A numerical procedure failed to reach its accuracy contract."""


class ModelQualityError(NumericError):
    """An ME approximation is too poor for downstream use."""


class UnsupportedOperation(SMJLSError, NotImplementedError):
    """Operation is not defined for the given model kind."""


class FitFailure(NumericError):
    """Fitting pipeline could not produce a non-negative density.

    Attributes
    ----------
    report : dict
        What was tried; the usual remedy is to raise the order.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}
