"""Exception hierarchy shared across the package."""


class SymDriftError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(SymDriftError, ValueError):
    pass


class InvalidGroupError(SymDriftError, ValueError):
    pass


class ShapeError(SymDriftError, ValueError):
    pass


class InvalidConfigError(SymDriftError, ValueError):
    pass


class ComplexityGuardError(SymDriftError):
    """Raised when an exhaustive search would exceed the configured budget."""


class SingularGradientError(SymDriftError, ArithmeticError):
    pass


class UnderflowError(SymDriftError, ArithmeticError):
    pass


class DataError(SymDriftError, ValueError):
    pass


class ParseError(SymDriftError, ValueError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class CorruptCheckpointError(SymDriftError, ValueError):
    pass


class InvalidCacheError(SymDriftError, ValueError):
    pass
