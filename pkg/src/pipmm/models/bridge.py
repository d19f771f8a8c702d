"""
Text-to-image bridge: maps the LLM prompt summary H_l (width d_llm) to the
class-slot vector T_class (width D) of the ViT.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..core.nn import Linear, Module, ModuleList, Parameter
from ..core.ops import gelu
from ..core.tensor import Tensor, as_tensor
from ..errors import ConfigError, NumericError, ShapeError

logger = logging.getLogger(__name__)

BRIDGE_KINDS = ('linear', 'mlp', 'static')

TCls = Tensor


@dataclass(frozen=True)
class BridgeConfig:
    kind: str = 'mlp'
    depth: int = 4
    d_in: int = 32
    d_hidden: Optional[int] = None
    d_out: int = 32

    @property
    def hidden(self) -> int:
        return self.d_in if self.d_hidden is None else self.d_hidden

    def validate(self) -> 'BridgeConfig':
        if self.kind not in BRIDGE_KINDS:
            raise ConfigError(f"unknown bridge kind {self.kind!r}", key='model.bridge_kind')
        if self.kind == 'mlp' and self.depth < 1:
            raise ConfigError(f"bridge depth must be >= 1, got {self.depth}",
                              key='model.bridge_depth')
        if min(self.d_in, self.d_out, self.hidden) < 1:
            raise ConfigError("bridge dimensions must be positive", key='model.bridge_kind')
        return self


def count_params(kind: str, d_in: int, d_out: int, depth: int = 1,
                 d_hidden: Optional[int] = None) -> int:
    """Closed-form parameter count of a bridge."""
    if kind == 'static':
        return d_out
    if kind == 'linear' or depth == 1:
        return d_in * d_out + d_out
    if depth < 1:
        raise ConfigError(f"bridge depth must be >= 1, got {depth}", key='model.bridge_depth')
    h = d_in if d_hidden is None else d_hidden
    return (d_in * h + h) + (depth - 2) * (h * h + h) + (h * d_out + d_out)


class TextToImageBridge(Module):
    """Affine layers with GELU between them and none after the last."""

    prompt_aware = True

    def __init__(self, config: BridgeConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        depth = 1 if config.kind == 'linear' else config.depth
        widths = [config.d_in] + [config.hidden] * (depth - 1) + [config.d_out]
        self.layers = ModuleList(
            Linear(widths[i], widths[i + 1], rng) for i in range(depth)
        )

    def __call__(self, prompt_vec: Tensor) -> TCls:
        prompt_vec = as_tensor(prompt_vec)
        if prompt_vec.shape != (self.config.d_in,):
            raise ShapeError(
                f"prompt vector must have shape ({self.config.d_in},), got {prompt_vec.shape}",
                prompt_vec.shape,
            )
        if not np.all(np.isfinite(prompt_vec.data)):
            raise NumericError("prompt vector contains NaN or Inf")
        h = prompt_vec.reshape(1, self.config.d_in)
        for i, layer in enumerate(self.layers):
            if i:
                h = gelu(h)
            h = layer(h)
        return h.reshape(self.config.d_out)

    def warm_start(self, class_vec: np.ndarray) -> None:
        """Set the output bias so a zero hidden state reproduces ``class_vec``."""
        self.layers[-1].bias.data = np.array(class_vec, dtype=np.float64)


class StaticBridge(Module):
    """Prompt-agnostic class slot: one learned D-vector."""

    prompt_aware = False

    def __init__(self, config: BridgeConfig, init: np.ndarray):
        super().__init__()
        self.config = config
        self.vector = Parameter(np.array(init, dtype=np.float64))

    def __call__(self, prompt_vec: Optional[Tensor] = None) -> TCls:
        return self.vector

    def warm_start(self, class_vec: np.ndarray) -> None:
        self.vector.data = np.array(class_vec, dtype=np.float64)


def build_bridge(config: BridgeConfig, seed: int, init: Optional[np.ndarray] = None) -> Module:
    """
    Build a bridge from its configuration.

    Args:
        config: Bridge configuration
        seed: Initialization seed
        init: Initial vector for the ``static`` kind (zeros when omitted)
    """
    config.validate()
    if config.kind == 'static':
        return StaticBridge(config, np.zeros(config.d_out) if init is None else init)
    return TextToImageBridge(config, np.random.default_rng(seed))


def t_cls(bridge: Module, prompt_vec: Tensor) -> TCls:
    """T_class = bridge(H_l)."""
    return bridge(prompt_vec)
