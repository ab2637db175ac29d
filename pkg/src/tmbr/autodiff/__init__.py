"""Minimal dense tensors with reverse-mode automatic differentiation."""

from . import ops
from .gradcheck import grad_check, grad_check_params, grad_check_tensors, relative_error
from .ops import PRIMITIVES, primitive_forward
from .tensor import (
    NumericError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    current_tape,
    default_dtype,
    precision,
)

__all__ = [
    "NumericError",
    "PRIMITIVES",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "backward",
    "current_tape",
    "default_dtype",
    "grad_check",
    "grad_check_params",
    "grad_check_tensors",
    "ops",
    "precision",
    "primitive_forward",
    "relative_error",
]
