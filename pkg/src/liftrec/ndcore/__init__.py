"""Minimal float64 tensor engine: autodiff, Adam, grad checking, checkpoints."""

from . import ops
from .checkpoint import load_params, save_params
from .gradcheck import GradCheckReport, grad_check
from .params import (
    AdamConfig,
    ParamStore,
    adam_step,
    init_attention_matrix,
    init_embedding,
    init_linear,
)
from .tensor import Tensor, grad_enabled, no_grad

__all__ = [
    "AdamConfig",
    "GradCheckReport",
    "ParamStore",
    "Tensor",
    "adam_step",
    "grad_check",
    "grad_enabled",
    "init_attention_matrix",
    "init_embedding",
    "init_linear",
    "load_params",
    "no_grad",
    "ops",
    "save_params",
]
