"""Exception hierarchy. Each class carries the process exit code used by the CLI."""


class DueError(Exception):
    exit_code = 1


class ValidationError(DueError, ValueError):
    exit_code = 2


class ConfigError(DueError, ValueError):
    exit_code = 3


class AnnotationError(DueError, ValueError):
    exit_code = 4


class CorruptFileError(DueError, IOError):
    exit_code = 5


class SplitError(DueError, ValueError):
    exit_code = 6


class TrainingError(DueError, RuntimeError):
    exit_code = 7


class InterpolationError(DueError, ValueError):
    exit_code = 8


class MetricUndefinedError(DueError, ValueError):
    exit_code = 9


class ReportingError(DueError, RuntimeError):
    exit_code = 10


class DependencyError(DueError, RuntimeError):
    """An upstream pipeline stage has not produced its outputs yet."""

    exit_code = 11

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage
