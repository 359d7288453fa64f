"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class TailgenError(Exception):
    exit_code = 2


class ConfigError(TailgenError, ValueError):
    """Bad configuration key/value or incompatible architecture."""

    exit_code = 1


class InputError(TailgenError, ValueError):
    """Caller passed data of the wrong shape, size or domain."""

    exit_code = 2


class FormatError(TailgenError, ValueError):
    """Malformed file (checkpoint, CSV, IDX)."""

    exit_code = 2

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(TailgenError, ArithmeticError):
    exit_code = 3


class ModeCollapseError(NumericError):
    """Two distinct latents were mapped to exactly the same output."""

    def __init__(self, i, j):
        super().__init__(f"mode collapse: T(z[{i}]) == T(z[{j}])")
        self.pair = (i, j)


class TrainingAborted(NumericError):
    """Raised when a loss goes non-finite; ``model`` holds the last good state."""

    def __init__(self, message, model=None, trace=None):
        super().__init__(message)
        self.model = model
        self.trace = trace if trace is not None else []
