"""Exception hierarchy shared across the package.

The CLI maps each class to a distinct process exit code, so new error
conditions should reuse one of these categories rather than raising bare
ValueError.
"""


class EvseqError(Exception):
    """Base class for all package errors."""


class ConfigError(EvseqError):
    """Malformed or out-of-range configuration value."""


class StageOrderError(EvseqError):
    """A pipeline stage was invoked before its prerequisites exist."""


class ValidationError(EvseqError):
    """Invalid data handed to an operation: bad shapes, ranges, domains,
    coordinate overflows, capacity overruns, or contract violations."""


class TrainingDiverged(EvseqError):
    """Non-finite loss encountered during optimization."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")
