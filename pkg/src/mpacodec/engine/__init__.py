"""A small reverse-mode differentiation engine on top of numpy."""

from . import ops
from .gradcheck import EvaluationError, grad_check
from .ops import DimensionError
from .params import (Adam, CheckpointError, ParameterStore, read_checkpoint,
                     write_checkpoint)
from .tensor import (ContractError, Tensor, as_tensor, backward, default_dtype,
                     no_grad, precision, relaxed)

__all__ = [
    "Adam", "CheckpointError", "ContractError", "DimensionError", "EvaluationError",
    "ParameterStore", "Tensor", "as_tensor", "backward", "default_dtype", "grad_check",
    "no_grad", "ops", "precision", "read_checkpoint", "relaxed", "write_checkpoint",
]
