"""Minimal float64 tensor engine with reverse-mode differentiation."""

from . import functional
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import check_gradients, numeric_grad, relative_error
from .nn import Conv2d, ConvTranspose2d, Linear, Module, Norm, Parameter
from .optim import AdamState, OneCycleSchedule, adam_step, one_cycle_lr
from .tensor import ShapeError, Tensor, as_tensor, concat, take_rows

__all__ = [
    "AdamState", "CheckpointError", "Conv2d", "ConvTranspose2d", "Linear", "Module", "Norm",
    "OneCycleSchedule", "Parameter", "ShapeError", "Tensor", "adam_step", "as_tensor",
    "check_gradients", "concat", "functional", "load_checkpoint", "numeric_grad",
    "one_cycle_lr", "relative_error", "save_checkpoint", "take_rows",
]
