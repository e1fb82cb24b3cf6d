"""Exception hierarchy shared by the library, the CLI and the service"""

from typing import Optional


class NeuroDodgeError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it"""
    exit_code = 2


class ConfigError(NeuroDodgeError, ValueError):
    """Invalid parameters or CLI usage"""
    exit_code = 1


class EventDataError(NeuroDodgeError, ValueError):
    """An event violates the stream invariants"""

    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message)
        self.index = index


class FormatError(EventDataError):
    """Malformed bytes in one of the binary or text formats"""

    def __init__(self, message: str, offset: Optional[int] = None, index: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message, index=index)
        self.offset = offset


class ShapeError(NeuroDodgeError, ValueError):
    """Tensor shape, resolution or time-step mismatch"""


class TrainingModeError(NeuroDodgeError, RuntimeError):
    """Backward pass requested on a record without membrane traces"""


class NumericError(NeuroDodgeError, ArithmeticError):
    """Non-finite loss or weights"""
    exit_code = 3
