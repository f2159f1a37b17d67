"""Exception hierarchy shared by every module.

The CLI maps :class:`EhsimError` subclasses to exit code 1 and argument
problems to exit code 2.
"""


class EhsimError(Exception):
    """Base class for all domain errors raised by the package."""


class DomainError(EhsimError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ShapeError(EhsimError, ValueError):
    """Array lengths or shapes are inconsistent."""


class ConfigError(EhsimError, ValueError):
    """A configuration value is invalid or mutually inconsistent."""


class IntegrationBlowupError(EhsimError, ArithmeticError):
    """An explicit integrator produced a non-finite or runaway state."""

    def __init__(self, message, index=None, coordinate=None):
        super().__init__(message)
        self.index = index
        self.coordinate = coordinate


class SingularFitError(EhsimError, ArithmeticError):
    """Normal equations are singular; a positive ridge is required."""


class FitDivergenceError(EhsimError, ArithmeticError):
    """The simulator fit produced a non-finite loss."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class ParseError(EhsimError, ValueError):
    """A data file is malformed."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
