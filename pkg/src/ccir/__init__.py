"""Concept-aligned composed image retrieval on synthetic scenes.

Everything runs on a small self-contained reverse-mode autodiff core
(:mod:`ccir.autograd`); no deep-learning framework is involved.
"""

from .tensor import ParameterSet, Tensor
from .optim import OptimizerState, adamw_step, halved_lr, load_checkpoint, save_checkpoint
from .autograd import (
    GraphError,
    NonFiniteError,
    ShapeError,
    forward_backward,
    grad_check,
)

__all__ = [
    "Tensor",
    "ParameterSet",
    "OptimizerState",
    "adamw_step",
    "halved_lr",
    "save_checkpoint",
    "load_checkpoint",
    "forward_backward",
    "grad_check",
    "GraphError",
    "NonFiniteError",
    "ShapeError",
]

__version__ = "0.1.0"
