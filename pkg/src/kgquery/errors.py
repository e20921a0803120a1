"""Exception hierarchy.

The CLI maps the three top-level families to exit codes: ConfigError -> 1,
DataError -> 2, NumericError -> 3.
"""


class KGQueryError(Exception):
    pass


class ConfigError(KGQueryError):
    pass


class DataError(KGQueryError):
    pass


class NumericError(KGQueryError):
    pass


class ParseError(DataError):
    """Malformed input; carries the 1-based line number (or token position) when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnknownNameError(DataError):
    def __init__(self, name, kind="name", line=None):
        self.name = name
        self.kind = kind
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"undeclared {kind} {name!r}{where}")


class DomainError(DataError):
    pass


class StructureError(DataError):
    pass


class SamplingExhausted(DataError):
    pass


class SplitError(DataError):
    pass


class TruncationError(DataError):
    pass


class CheckpointError(DataError):
    pass


class ModeError(ConfigError):
    pass
