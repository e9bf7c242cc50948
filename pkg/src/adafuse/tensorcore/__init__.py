"""Dense float64 tensors with reverse-mode differentiation."""
from . import ops
from .graph import Context, DiffGraph, GradCheckReport, grad_check, relative_error
from .tensor import DTYPE, Parameter, ShapeError, Tensor, as_tensor, backward, constant

__all__ = [
    "DTYPE",
    "Context",
    "DiffGraph",
    "GradCheckReport",
    "Parameter",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "backward",
    "constant",
    "grad_check",
    "ops",
    "relative_error",
]
