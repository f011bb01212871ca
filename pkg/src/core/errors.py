"""Structured errors raised across the registration engine."""
from enum import Enum
from typing import Any, Dict, Optional


class ErrorCode(str, Enum):
    SHAPE_MISMATCH = "SHAPE_MISMATCH"
    INVALID_CONFIG = "INVALID_CONFIG"
    DEGENERATE_INPUT = "DEGENERATE_INPUT"
    NON_FINITE_LOSS = "NON_FINITE_LOSS"
    BAD_FORMAT = "BAD_FORMAT"
    GENERATION_FAILED = "GENERATION_FAILED"
    IO_ERROR = "IO_ERROR"


class WarpforgeError(ValueError):
    """Base error. Carries a code and a context dict for reports."""

    code: ErrorCode = ErrorCode.INVALID_CONFIG

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context

    def to_dict(self) -> Dict[str, Any]:
        return {
            "code": self.code.value,
            "message": self.message,
            **{k: str(v) for k, v in self.context.items()},
        }


class ShapeError(WarpforgeError):
    code = ErrorCode.SHAPE_MISMATCH


class ConfigError(WarpforgeError):
    code = ErrorCode.INVALID_CONFIG


class DegenerateInputError(WarpforgeError):
    code = ErrorCode.DEGENERATE_INPUT


class NumericalError(WarpforgeError):
    code = ErrorCode.NON_FINITE_LOSS

    def __init__(self, message: str, iteration: int, **context: Any):
        super().__init__(message, iteration=iteration, **context)
        self.iteration = iteration


class FormatError(WarpforgeError):
    code = ErrorCode.BAD_FORMAT

    def __init__(self, message: str, offset: Optional[int] = None, **context: Any):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message, offset=offset, **context)
        self.offset = offset


class GenerationError(WarpforgeError):
    code = ErrorCode.GENERATION_FAILED

    def __init__(self, message: str, attempts: int, **context: Any):
        super().__init__(message, attempts=attempts, **context)
        self.attempts = attempts
