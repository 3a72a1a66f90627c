"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """An argument violates an operation's precondition."""


class ParseError(ValueError):
    """A dataset or config file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnsupportedOperation(NotImplementedError):
    """The requested evaluator does not exist for this model/loss family."""


class NumericError(ArithmeticError):
    """A numerical routine failed (singular solve, CG non-convergence, ...)."""

    def __init__(self, message, residual=None):
        if residual is not None:
            message = f"{message} (final relative residual {residual:.3e})"
        super().__init__(message)
        self.residual = residual
