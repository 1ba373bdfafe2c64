"""Exception hierarchy shared across the package."""


class CartlError(Exception):
    """Base class for all package errors."""


class ConfigError(CartlError, ValueError):
    """Invalid configuration or allocation specification."""


class SchemaError(CartlError, ValueError):
    """Input data does not match the declared column schema."""


class ParseError(CartlError, ValueError):
    """A data cell could not be parsed as a number."""

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class InputError(CartlError, ValueError):
    """Empty or otherwise unusable input file."""


class DegenerateDesignError(CartlError, ValueError):
    """A (stratum, arm) cell is empty or too small for the requested quantity."""

    def __init__(self, message, cell=None):
        super().__init__(message)
        self.cell = cell


class AlignmentError(CartlError, ValueError):
    """Source and target trials disagree on p, K or A."""


class ConvergenceError(CartlError, RuntimeError):
    """Coordinate descent did not reach the convergence criteria."""

    def __init__(self, message, coef=None, violation=None, cell=None):
        super().__init__(message)
        self.coef = coef
        self.violation = violation
        self.cell = cell
