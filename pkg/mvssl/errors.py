"""Error taxonomy shared by every mvssl module.

Each error carries a machine-readable ``category`` and the process exit code the
CLI maps it to.
"""
from typing import Optional


class MvsslError(Exception):
    """Base class for all mvssl errors."""
    category = "error"
    exit_code = 1


class ConfigurationError(MvsslError, ValueError):
    """Invalid or inconsistent configuration."""
    category = "config"
    exit_code = 3


class ValidationError(MvsslError, ValueError):
    """Invalid input to a library operation."""
    category = "validation"
    exit_code = 3


class DimensionError(ValidationError):
    """Tensor shapes do not agree."""

    def __init__(self, message: str, *shapes: tuple):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = shapes


class BatchTooSmallError(ValidationError):
    """Batch statistics need at least two samples."""


class EmptyInputError(ValidationError):
    """An operation received an empty list, sequence or batch."""


class VocabularyError(ValidationError, KeyError):
    """A prompt token or word is not in the vocabulary."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class UnknownClassError(ValidationError, KeyError):
    """A class id or name is not known to the prompt bank."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class RankError(ValidationError):
    """backward() was called on a non-scalar tensor."""


class NumericError(ValidationError, ArithmeticError):
    """NaN or non-finite values where finite ones are required."""


class TapeError(MvsslError, RuntimeError):
    """Misuse of the gradient tape."""
    category = "tape"


class DivergenceError(MvsslError, ArithmeticError):
    """Training produced a non-finite or exploding loss."""
    category = "divergence"
    exit_code = 4

    def __init__(self, message: str, component: Optional[str] = None):
        super().__init__(message)
        self.component = component
