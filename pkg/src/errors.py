from typing import Dict, Optional, Type


class SmlmError(Exception):
    """Base class for all errors raised by the package."""

    exit_code = 1


class ConfigurationError(SmlmError, ValueError):
    """Invalid configuration values or command-line arguments."""

    exit_code = 2


class DataError(SmlmError, ValueError):
    """Input data that cannot be processed."""

    exit_code = 3


class EmitterOutOfBoundsError(DataError):
    """An emitter lies outside the field of view or grid extents."""

    def __init__(self, index: int, message: str) -> None:
        super().__init__(f"emitter {index}: {message}")
        self.index = index


class CorruptFileError(DataError):
    """A persisted file is truncated, has the wrong version or checksum."""

    def __init__(self, path: str, reason: str) -> None:
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class CheckpointMismatchError(DataError):
    """A checkpoint or cache does not match the objects it is used with."""


class NumericalError(SmlmError, ArithmeticError):
    """Non-finite values, singular systems or failed gradient audits."""

    exit_code = 4

    def __init__(self, message: str, parameter: Optional[str] = None) -> None:
        super().__init__(message)
        self.parameter = parameter


EXIT_CODES: Dict[Type[SmlmError], int] = {
    ConfigurationError: 2,
    DataError: 3,
    NumericalError: 4,
}


def exit_code_for(error: BaseException) -> int:
    """Map an exception to the documented process exit code."""
    if isinstance(error, KeyboardInterrupt):
        return 130
    for error_type, code in EXIT_CODES.items():
        if isinstance(error, error_type):
            return code
    if isinstance(error, FileNotFoundError):
        return 2
    return 1
