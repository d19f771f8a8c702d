"""
pipmm Core Module.

This package contains the numerical core:
- Tensor: float64 arrays with reverse-mode gradients
- ops: softmax, layer norm, GELU and embedding lookups
- nn: Module, Linear, attention and transformer blocks
- Optimizer: SGD and Adam with global norm clipping
- profiling: FLOP scopes, live-float accounting and timing
"""

from .tensor import Tensor, Function, Tape, backward, no_grad, is_grad_enabled
from .nn import Module, ModuleList, Parameter, Linear, LayerNorm, MultiHeadAttention, \
    TransformerBlock
from .optim import Optimizer, OptimizerState
from .gradcheck import GradCheckReport, finite_diff_check, finite_diff_report

__all__ = [
    "Tensor",
    "Function",
    "Tape",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "Module",
    "ModuleList",
    "Parameter",
    "Linear",
    "LayerNorm",
    "MultiHeadAttention",
    "TransformerBlock",
    "Optimizer",
    "OptimizerState",
    "GradCheckReport",
    "finite_diff_check",
    "finite_diff_report",
]
