"""Minimal reverse-mode automatic differentiation over float64 tensors."""

from . import ops
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, check_gradients
from .optim import Adam, AdamState, adam_step, clip_global_norm
from .tensor import NonFiniteError, Tape, Tensor, active_tape, no_grad

__all__ = [
    "Adam",
    "AdamState",
    "CheckpointError",
    "GradCheckReport",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "active_tape",
    "adam_step",
    "check_gradients",
    "clip_global_norm",
    "load_checkpoint",
    "no_grad",
    "ops",
    "save_checkpoint",
]
