"""Custom exceptions for ncchart."""


class NcChartError(Exception):
    """Base exception for ncchart."""

    pass


class NonConfluentError(NcChartError):
    """Substitution or rewriting exceeded its depth bound."""

    pass


class NotInvertibleError(NcChartError):
    """An inverse was requested for an expression not declared invertible."""

    pass


class UnresolvedInverseError(NcChartError):
    """A formal operator inverse survived on an evaluation path."""

    pass


class InvalidRuleError(NcChartError):
    """An intertwining rule failed verification and was rejected."""

    pass


class UnknownIdentityError(NcChartError):
    """Requested identity is not registered."""

    pass


class NonlocalFlowError(NcChartError):
    """A hierarchy flow kept an unresolved integral."""

    pass


class ZeroModeViolationError(NcChartError):
    """Integrand mean exceeded the zero-mode tolerance."""

    pass


class SingularSampleError(NcChartError):
    """Per-point matrix inversion exceeded the condition cap."""

    pass


class UnsupportedEvaluationError(NcChartError):
    """Expression contains atoms the numeric backend cannot evaluate."""

    pass


class CatalogLoadError(NcChartError):
    """Catalog could not be loaded or failed its load-time checks."""

    pass


class UndeclaredSymbolError(NcChartError):
    """A script referenced a name before declaring it."""

    def __init__(self, name: str, line: int | None = None, column: int | None = None):
        self.name = name
        self.line = line
        self.column = column
        where = f" at line {line}, column {column}" if line is not None else ""
        super().__init__(f"Undeclared symbol '{name}'{where}")


class DslSyntaxError(NcChartError):
    """Script text does not match the grammar."""

    def __init__(self, message: str, line: int, column: int):
        self.line = line
        self.column = column
        super().__init__(f"{message} (line {line}, column {column})")
