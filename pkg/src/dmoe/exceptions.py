"""Exception hierarchy.

Validation problems derive from :class:`InvalidInputError` (a ``ValueError``);
numerical breakdowns derive from :class:`NumericalError`. The CLI maps the
first family to exit code 1 and the second to exit code 2.
"""


class DmoeError(Exception):
    """Base class for all package errors."""


class InvalidInputError(DmoeError, ValueError):
    pass


class UnsupportedOrderError(InvalidInputError):
    pass


class InvalidStepError(InvalidInputError):
    pass


class InvalidGridError(InvalidInputError):
    pass


class UnsupportedCellSizeError(InvalidInputError):
    """Raised when a Voronoi cell has a cardinality with no known exponent."""

    def __init__(self, cardinality, message=None):
        self.cardinality = int(cardinality)
        super().__init__(
            message
            or f"no solvability exponent available for a cell of size {self.cardinality}"
        )


class InvalidProportionError(InvalidInputError):
    pass


class InvalidConfigurationError(InvalidInputError):
    pass


class MissingReferenceError(InvalidInputError):
    pass


class RegimeMismatchError(InvalidInputError):
    pass


class InsufficientDataError(InvalidInputError):
    pass


class NumericalError(DmoeError, ArithmeticError):
    pass


class NumericalDegeneracyError(NumericalError):
    def __init__(self, message, index=None):
        self.index = index
        super().__init__(message)


class DegenerateNormalizerError(NumericalError):
    pass


class QuadratureError(NumericalError):
    pass


class FitFailureError(NumericalError):
    def __init__(self, message, diagnostics=None):
        self.diagnostics = diagnostics or []
        super().__init__(message)
