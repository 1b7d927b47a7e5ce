"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A precondition or structural invariant was violated by the caller."""


class ConfigError(ValueError):
    """Invalid run configuration or schedule."""


class NumericError(ArithmeticError):
    """NaN or infinite values surfaced during optimization."""


class ParseError(ValueError):
    """Malformed serialized input.

    ``offset`` is a character offset for JSON payloads; ``line`` is a
    1-based line number for CSV files.
    """

    def __init__(self, message, *, offset=None, line=None):
        where = []
        if offset is not None:
            where.append(f"offset {offset}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.offset = offset
        self.line = line
