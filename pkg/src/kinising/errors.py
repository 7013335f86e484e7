"""Exception types shared by the library and the command line."""


class ValidationError(ValueError):
    """Input violates a documented contract (shapes, ordering, ranges)."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values or a factorization failed."""
