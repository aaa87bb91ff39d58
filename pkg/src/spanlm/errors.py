"""Exception hierarchy shared across the package, with CLI exit-code classes."""


class SpanLMError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class UsageError(SpanLMError):
    """Bad command invocation (missing/contradictory arguments)."""

    exit_code = 2


class InputError(SpanLMError):
    """Invalid data handed to an operation (bad ids, bad lengths, malformed files)."""

    exit_code = 3


class ScheduleError(InputError):
    """A decode schedule asked for a span outside the sequence."""


class NumericError(SpanLMError):
    """Non-finite values or degenerate distributions where numbers were required."""

    exit_code = 4


class TrainingDivergedError(NumericError):
    """Training loss became non-finite."""


class CheckpointError(SpanLMError):
    """Checkpoint/manifest versioning or integrity failure."""

    exit_code = 5


class ConfigError(SpanLMError):
    """Invalid configuration values (vocab sizes, ranges, stage wiring)."""

    exit_code = 6
