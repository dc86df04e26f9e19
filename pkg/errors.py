"""
Error Module
Exception types raised by the shaping toolkit
"""

from typing import Optional


class ShapingError(Exception):
    """Base class for all toolkit errors"""
    exit_code = 1


class ShapeMismatchError(ShapingError, ValueError):
    def __init__(self, kind: str, left_shape, right_shape):
        self.kind = kind
        self.left_shape = tuple(left_shape)
        self.right_shape = tuple(right_shape)
        super().__init__(
            f"{kind}: shape mismatch between {self.left_shape} and {self.right_shape}"
        )


class DegenerateConstellationError(ShapingError, ValueError):
    """A sub-constellation has zero power under the shaping distribution"""


class ConfigError(ShapingError):
    exit_code = 2

    def __init__(self, message: str, problems: Optional[list] = None):
        self.problems = list(problems or [])
        if self.problems:
            message = message + ": " + "; ".join(self.problems)
        super().__init__(message)


class CheckpointMissingError(ShapingError, FileNotFoundError):
    exit_code = 3


class NumericalFailure(ShapingError, ArithmeticError):
    exit_code = 4

    def __init__(self, message: str, iteration: Optional[int] = None,
                 snr_db: Optional[float] = None, term: Optional[str] = None):
        self.iteration = iteration
        self.snr_db = snr_db
        self.term = term
        details = []
        if iteration is not None:
            details.append(f"iteration={iteration}")
        if snr_db is not None:
            details.append(f"snr_db={snr_db:.3f}")
        if term is not None:
            details.append(f"term={term}")
        if details:
            message = f"{message} ({', '.join(details)})"
        super().__init__(message)


class GradientCheckFailure(ShapingError, ArithmeticError):
    exit_code = 4

    def __init__(self, index: int, message: str):
        self.index = index
        super().__init__(f"parameter {index}: {message}")
