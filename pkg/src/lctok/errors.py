"""Exception categories shared by every stage.

The CLI maps each class to its own exit status, so callers can tell a
misordered pipeline from a corrupt checkpoint without parsing messages.
"""


class LctokError(Exception):
    exit_code = 1


class ContractViolation(LctokError, ValueError):
    """A precondition of a public operation was not met."""

    exit_code = 2


class ConfigError(LctokError):
    exit_code = 3

    def __init__(self, message, key=None, line=None):
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.key = key
        self.line = line


class StageOrderError(LctokError):
    """A stage was run before one of its prerequisites."""

    exit_code = 4

    def __init__(self, missing, message=None):
        text = f"missing prerequisite stage {missing!r}"
        super().__init__(f"{message} ({text})" if message else text)
        self.missing = missing


class TrainingDivergence(LctokError, FloatingPointError):
    exit_code = 5


class TrainingFailure(LctokError):
    """Training finished without reaching its configured target."""

    exit_code = 6

    def __init__(self, message, metrics=None):
        super().__init__(message)
        self.metrics = dict(metrics or {})


class IntegrityError(LctokError):
    exit_code = 7


class ShapeMismatch(LctokError):
    exit_code = 8

    def __init__(self, names, message=None):
        names = list(names)
        super().__init__(message or f"shape mismatch for parameters: {', '.join(names)}")
        self.names = names


class InvariantViolation(LctokError):
    exit_code = 9


class RunLocked(LctokError):
    """Another process holds the run directory."""

    exit_code = 10
