"""
SGD and Adam updates over named parameters.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from ..errors import ContractError, NumericError, ShapeError
from .tensor import Tensor

logger = logging.getLogger(__name__)

OPTIMIZER_MODES = ('sgd', 'adam')


@dataclass
class OptimizerState:
    """Moment buffers and hyperparameters for one optimizer."""
    lr: float
    mode: str = 'adam'
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in OPTIMIZER_MODES:
            raise ContractError(f"unknown optimizer mode {self.mode!r}")


def global_grad_norm(params: Iterable[Tuple[str, Tensor]]) -> float:
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def optimizer_step(params: Iterable[Tuple[str, Tensor]], state: OptimizerState,
                   mode: Optional[str] = None, clip_norm: Optional[float] = None) -> OptimizerState:
    """
    Apply one update to every parameter that has a gradient.

    Args:
        params: (name, parameter) pairs; gradients are read from ``parameter.grad``
        state: Optimizer state, mutated in place
        mode: Overrides ``state.mode`` when given
        clip_norm: Optional global gradient-norm ceiling

    Returns:
        The updated state
    """
    mode = mode or state.mode
    if mode not in OPTIMIZER_MODES:
        raise ContractError(f"unknown optimizer mode {mode!r}")
    if not state.lr > 0:
        raise ContractError(f"learning rate must be positive, got {state.lr}")

    active: List[Tuple[str, Tensor]] = []
    for name, p in params:
        if p.grad is None:
            continue
        if p.grad.shape != p.shape:
            raise ShapeError(f"gradient of {name} has shape {p.grad.shape}, "
                             f"parameter has {p.shape}", p.grad.shape, p.shape)
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name}", parameter=name)
        active.append((name, p))

    scale = 1.0
    if clip_norm is not None:
        norm = global_grad_norm(active)
        if norm > clip_norm:
            scale = clip_norm / norm
            logger.debug(f"clipping gradient norm {norm:.4g} to {clip_norm}")

    state.step += 1
    if mode == 'sgd':
        for _, p in active:
            p.data = p.data - state.lr * (p.grad * scale)
        return state

    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for name, p in active:
        g = p.grad * scale
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return state


class Optimizer:
    """Binds an OptimizerState to a fixed set of named parameters."""

    def __init__(self, named_params: Iterable[Tuple[str, Tensor]], lr: float,
                 mode: str = 'adam', clip_norm: Optional[float] = 1.0,
                 state: Optional[OptimizerState] = None):
        self.params = list(named_params)
        self.clip_norm = clip_norm
        self.state = state if state is not None else OptimizerState(lr=lr, mode=mode)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> OptimizerState:
        return optimizer_step(self.params, self.state, clip_norm=self.clip_norm)
