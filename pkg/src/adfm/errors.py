"""Exception types shared across the package."""


class AdfmError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(AdfmError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(AdfmError, ValueError):
    """A precondition of an operation was violated."""


class SpecError(AdfmError, ValueError):
    """A synthetic-data spec is degenerate or inconsistent."""


class ParseError(AdfmError, ValueError):
    """A dataset line does not follow the JSONL schema."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)


class UndefinedMetricError(AdfmError, ValueError):
    """A ranking metric is undefined for the given labels."""


class ConfigError(AdfmError, ValueError):
    """Invalid run, model or training configuration."""
