"""Shared exception types and the process exit codes the CLI maps them to."""


class ToolkitError(Exception):
    """Base class for errors raised by this package."""

    exit_code = 1


class ConfigError(ToolkitError):
    """Bad configuration: missing files, unknown options, inconsistent setup."""

    exit_code = 2


class DataError(ToolkitError):
    """Malformed or inconsistent input data."""

    exit_code = 3

    def __init__(self, message: str, *, line: int | None = None, offset: int | None = None):
        super().__init__(message)
        self.line = line
        self.offset = offset


class BackendError(ToolkitError):
    """Scoring backend failure. ``kind`` is "transport" or "protocol"."""

    exit_code = 4

    def __init__(self, message: str, *, kind: str = "transport"):
        super().__init__(message)
        self.kind = kind


class ValidatorError(ToolkitError):
    """Validator infrastructure failure, distinct from a plain incorrect answer."""

    exit_code = 5


class UndefinedSignalError(ToolkitError):
    """A step signal has no defined value, e.g. an aggregation over an empty answer set."""


class UndefinedMetricError(ToolkitError):
    """A metric denominator is zero for the given counts."""


class ReservedSymbolError(DataError):
    """Question or step text contains one of the reserved marker symbols."""

    def __init__(self, message: str, *, reason_code: str):
        super().__init__(message)
        self.reason_code = reason_code
