"""Exception types shared across the package."""


class MissingGpError(Exception):
    """Base class for package errors."""


class ShapeMismatchError(MissingGpError, ValueError):
    """Operands have incompatible shapes."""

    def __init__(self, op, shape_a, shape_b):
        self.op = op
        self.shapes = (tuple(shape_a), tuple(shape_b))
        super().__init__(f"{op}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}")


class ContractError(MissingGpError, ValueError):
    """A documented precondition was violated by the caller."""


class DecompositionError(MissingGpError, ArithmeticError):
    """Matrix factorization failed even after stabilization."""

    def __init__(self, message, diagnostics=None):
        self.diagnostics = dict(diagnostics or {})
        if self.diagnostics:
            detail = ", ".join(f"{k}={v}" for k, v in self.diagnostics.items())
            message = f"{message} ({detail})"
        super().__init__(message)


class ParseError(MissingGpError, ValueError):
    """A cell in an input file could not be parsed."""

    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        super().__init__(message)


class SchemaError(MissingGpError, ValueError):
    """Input file does not match the declared schema."""


class InjectionError(MissingGpError, RuntimeError):
    """Missingness injection could not satisfy its constraints."""


class AggregationError(MissingGpError, ValueError):
    """A results table is incomplete for the requested aggregation."""

    def __init__(self, message, holes=()):
        self.holes = list(holes)
        super().__init__(message)


class TrainingDivergedError(MissingGpError, RuntimeError):
    """Training produced a non-finite objective."""

    def __init__(self, message, snapshot=None):
        self.snapshot = dict(snapshot or {})
        super().__init__(message)
