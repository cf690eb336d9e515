"""Error hierarchy shared by every service.

Each error carries the process exit code the CLI reports for it.
"""


class UFCError(Exception):
    """Base class for all matcher errors."""

    exit_code: int = 1


class UsageError(UFCError):
    """Bad command-line usage or a missing input the user must supply."""

    exit_code = 2


class ConfigurationError(UFCError):
    """Invalid configuration value or incompatible architecture setting."""

    exit_code = 2


class DimensionError(UFCError):
    """Array extents that do not fit together."""

    exit_code = 2


class ContractError(UFCError):
    """A caller broke an operation's precondition."""

    exit_code = 2


class DomainError(UFCError):
    """A scalar argument outside its mathematical domain."""

    exit_code = 2


class FormatError(UFCError):
    """Malformed file contents."""

    exit_code = 3

    def __init__(self, message: str, offset: int | None = None) -> None:
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class GenerationError(UFCError):
    """Synthetic data could not be generated."""

    exit_code = 3


class EvaluationError(UFCError):
    """A metric was requested over an empty or inconsistent set."""

    exit_code = 3


class NumericError(UFCError):
    """NaN or Inf appeared in a computation."""

    exit_code = 4
