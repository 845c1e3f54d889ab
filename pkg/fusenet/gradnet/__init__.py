"""
Minimal reverse-mode automatic differentiation over numpy arrays, with the
layers, optimizer and checkpoint format the networks in this package use.
"""
from .tensor import Tensor, no_grad, precision, is_grad_enabled, default_dtype  # noqa: F401
from .module import Module, Parameter, Conv3d, BatchNorm3d, Linear  # noqa: F401
from .optim import AdamState, CyclicLrSchedule, adam_step, lr_at  # noqa: F401
from .checkpoint import (  # noqa: F401
    save_checkpoint, load_checkpoint, read_checkpoint, write_checkpoint, module_entries
)
from . import ops  # noqa: F401
