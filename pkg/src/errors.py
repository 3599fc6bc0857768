from typing import Optional


class PipelineError(Exception):
    """Base class for every error raised by this package."""


class DatasetError(PipelineError):
    """A dataset file could not be validated."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(PipelineError):
    """Invalid experiment, backend or price configuration."""


class HandoffError(PipelineError):
    """A handoff prompt was requested with the wrong upstream artifacts."""


class BackendError(PipelineError):
    """An agent backend failed to produce a response."""


class BackendTimeout(BackendError):
    pass


class AuthenticationError(BackendError):
    pass


class RetryBudgetExhausted(BackendError):
    pass


class FixtureMissError(BackendError):
    """The scripted backend was asked for a prompt it has no fixture for."""


class TraceError(PipelineError):
    """A trace file is corrupt or could not be written."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ResumeError(PipelineError):
    """A run cannot be resumed against the given inputs."""


class MetricsError(PipelineError):
    pass


class RunError(PipelineError):
    """A run could not start."""
