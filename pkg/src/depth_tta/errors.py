"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures to
category-specific process exit codes.
"""


class DepthTTAError(Exception):
    exit_code = 1


class ConfigError(DepthTTAError, ValueError):
    exit_code = 2


class ParameterError(ConfigError):
    pass


class InputError(DepthTTAError, ValueError):
    exit_code = 3


class DimensionError(InputError):
    """Raised when tensor shapes are incompatible."""

    def __init__(self, message, axes=None):
        super().__init__(message if axes is None else f"{message} (axes {axes})")
        self.axes = axes


class IngestionError(InputError):
    """Malformed file on disk; records the file and byte offset of the problem."""

    def __init__(self, path, offset, reason):
        super().__init__(f"{path}: byte {offset}: {reason}")
        self.path = str(path)
        self.offset = offset


class NumericError(DepthTTAError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericError):
    def __init__(self, step, message="loss became non-finite"):
        super().__init__(f"step {step}: {message}")
        self.step = step


class BehindCameraError(NumericError):
    pass


class UsageError(DepthTTAError, RuntimeError):
    exit_code = 1


class ReportIOError(DepthTTAError, OSError):
    exit_code = 5
