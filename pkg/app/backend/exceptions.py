from typing import Optional


class NwsdError(Exception):
    """Base exception for every failure the pipeline reports to the operator."""
    exit_code = 1

    def __init__(self, message: str):
        self.message = message
        super().__init__(message)


class ConfigError(NwsdError):
    """Invalid or unknown configuration; names the offending key when known."""
    exit_code = 2

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(f"{message} (key: {key})" if key else message)


class FormatError(NwsdError):
    """Corrupt or truncated binary/text input."""
    exit_code = 3

    def __init__(self, message: str, offset: Optional[int] = None, path: Optional[str] = None):
        self.offset = offset
        self.path = path
        where = ""
        if path:
            where += f" in {path}"
        if offset is not None:
            where += f" at byte offset {offset}"
        super().__init__(f"{message}{where}")


class DataIOError(NwsdError):
    """A required input file is missing or unreadable."""
    exit_code = 3

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        super().__init__(f"{message}: {path}" if path else message)


class ReportError(NwsdError):
    exit_code = 3


class NumericError(NwsdError):
    """Non-finite values reached a place where they cannot be recovered from."""
    exit_code = 4


class ShapeError(ValueError):
    """Operand shapes do not agree."""


class StateError(RuntimeError):
    """An object was used out of order (e.g. backward before forward)."""


class PipelineError(NwsdError):
    """Failure inside one stage of a command, carrying the stage name."""

    def __init__(self, message: str, step: str, cause: Optional[NwsdError] = None):
        self.step = step
        self.cause = cause
        if cause is not None:
            self.exit_code = cause.exit_code
        super().__init__(f"Pipeline error at step '{step}': {message}")
