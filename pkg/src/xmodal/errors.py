"""Exception types shared across the toolkit.

Every error class carries the process exit code the CLI maps it to:
0 ok, 2 usage/argument, 3 numerical, 4 data (lookup/format), 5 training.
"""

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_DATA = 4
EXIT_TRAINING = 5


class ToolkitError(Exception):
    """Base class for all toolkit errors."""

    exit_code = EXIT_DATA


class ArgumentError(ToolkitError):
    """A caller-supplied argument violates an operation's precondition."""

    exit_code = EXIT_USAGE


class FormatError(ToolkitError):
    """A file does not conform to its container format (magic, version, field codes)."""

    exit_code = EXIT_DATA


class CorruptionError(FormatError):
    """Recognized container whose payload is truncated or internally inconsistent."""


class ValidationError(ToolkitError):
    """Decoded data violates a domain invariant (non-finite values, duplicate ids, ...)."""

    exit_code = EXIT_DATA


class UnknownIdError(ToolkitError):
    """An identifier does not resolve to any row of the referenced matrix."""

    exit_code = EXIT_DATA


class NumericalError(ToolkitError):
    """A numerical routine could not produce a trustworthy result."""

    exit_code = EXIT_NUMERICAL


class IllConditionedError(NumericalError):
    """Normal-equation system too ill-conditioned to solve without regularization."""


class TrainingError(ToolkitError):
    """Head training diverged."""

    exit_code = EXIT_TRAINING
