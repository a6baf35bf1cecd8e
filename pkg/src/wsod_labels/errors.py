"""Error types shared by the pipeline and their command-line exit codes."""

EXIT_OK = 0
EXIT_INVARIANT = 1
EXIT_BAD_INPUT = 2


class BadInputError(ValueError):
    """Raised for malformed, missing or inconsistent user input."""


class InvariantViolation(RuntimeError):
    """Raised when an internal invariant does not hold."""
