"""Exception hierarchy shared across the package."""

from __future__ import annotations


class HedgeflowError(Exception):
    """Base class for all package errors."""


class DataParseError(HedgeflowError):
    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class BarValidationError(HedgeflowError):
    def __init__(self, date, message: str):
        self.date = date
        super().__init__(f"{date}: {message}")


class InsufficientHistoryError(HedgeflowError):
    pass


class UnknownIndicatorError(HedgeflowError):
    pass


class TemporalGatingError(HedgeflowError):
    """Raised when data dated after the engine clock would become visible."""


class DimensionMismatchError(HedgeflowError):
    pass


class TemplateError(HedgeflowError):
    def __init__(self, template: str, placeholder: str):
        self.template = template
        self.placeholder = placeholder
        super().__init__(f"template {template!r}: unresolved placeholder {placeholder!r}")


class GatewayError(HedgeflowError):
    pass


class DeterminismViolation(GatewayError):
    def __init__(self, expected: str | None, got: str):
        self.expected = expected
        self.got = got
        super().__init__(
            f"cassette mismatch: expected fingerprint {expected or '<end of cassette>'}, got {got}"
        )


class PSDViolationError(HedgeflowError):
    pass


class ConvergenceError(HedgeflowError):
    def __init__(self, message: str, last_iterate, trace):
        self.last_iterate = last_iterate
        self.trace = list(trace)
        super().__init__(message)


class MetricError(HedgeflowError):
    def __init__(self, metric: str, message: str):
        self.metric = metric
        super().__init__(f"{metric}: {message}")


class ConfigError(HedgeflowError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class EngineInvariantError(HedgeflowError):
    def __init__(self, message: str, state_dump: dict):
        self.state_dump = state_dump
        super().__init__(message)
