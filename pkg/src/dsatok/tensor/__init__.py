"""Dense float32 tensors with reverse-mode autodiff."""

from .autograd import (
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    default_dtype,
    is_grad_enabled,
    no_grad,
    precision,
    tensor,
)
from . import ops
from .gradcheck import finite_difference_check
from .optim import AdamW, AdamWState, WarmupCosine

__all__ = [
    "AdamW",
    "AdamWState",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "WarmupCosine",
    "backward",
    "finite_difference_check",
    "default_dtype",
    "is_grad_enabled",
    "no_grad",
    "precision",
    "ops",
    "tensor",
]
