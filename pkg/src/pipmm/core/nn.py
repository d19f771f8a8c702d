"""
Parameter containers and transformer building blocks shared by the ViT and
the text model.
"""

import math
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..errors import ConfigError, ShapeError
from .ops import gelu, layer_norm, softmax_rows
from .tensor import Tensor, concat

INIT_STD = 0.02


class Parameter(Tensor):
    """A leaf tensor owned by a Module."""

    def __init__(self, data, requires_grad: bool = True, name: str = None):
        super().__init__(data, requires_grad=requires_grad, name=name)


class Module:
    """Named tree of parameters and submodules, registered in assignment order."""

    def __init__(self):
        object.__setattr__(self, '_parameters', OrderedDict())
        object.__setattr__(self, '_modules', OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
            self._modules.pop(name, None)
        elif isinstance(value, Module):
            self._modules[name] = value
            self._parameters.pop(name, None)
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Parameter]]:
        for name, param in self._parameters.items():
            yield prefix + name, param
        for name, module in self._modules.items():
            yield from module.named_parameters(prefix + name + '.')

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_children(self) -> Iterator[Tuple[str, 'Module']]:
        return iter(self._modules.items())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool = True) -> 'Module':
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise ConfigError(
                f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}"
            )
        for name, value in state.items():
            if own[name].shape != tuple(value.shape):
                raise ShapeError(
                    f"parameter {name} has shape {own[name].shape}, state has {value.shape}",
                    own[name].shape, value.shape,
                )
            own[name].data = np.array(value, dtype=np.float64)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        object.__setattr__(self, '_items', [])
        for module in modules:
            self.append(module)

    def append(self, module: Module) -> None:
        self._modules[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]


def normal_init(rng: np.random.Generator, *shape: int, std: float = INIT_STD) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, std: float = INIT_STD):
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        self.weight = Parameter(normal_init(rng, d_in, d_out, std=std))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = x @ self.weight
        if self.bias is not None:
            out = out + self.bias
        return out


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    """
    Scaled dot-product attention with ``heads`` heads of width d/heads.

    Q/K/V projections are bias-free; the output projection has a bias.
    Queries may come from a different sequence than keys (cross-attention).
    """

    def __init__(self, d: int, heads: int, rng: np.random.Generator,
                 d_kv: int = None, std: float = INIT_STD):
        super().__init__()
        if d % heads:
            raise ConfigError(f"width {d} is not divisible by {heads} heads")
        d_kv = d if d_kv is None else d_kv
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        self.w_q = Parameter(normal_init(rng, d, d, std=std))
        self.w_k = Parameter(normal_init(rng, d_kv, d, std=std))
        self.w_v = Parameter(normal_init(rng, d_kv, d, std=std))
        self.out = Linear(d, d, rng, std=std)

    def __call__(self, x: Tensor, kv: Optional[Tensor] = None,
                 mask: Optional[np.ndarray] = None) -> Tuple[Tensor, np.ndarray]:
        """
        Returns:
            (output, attention) where attention has shape heads x queries x keys
        """
        source = x if kv is None else kv
        q = x @ self.w_q
        k = source @ self.w_k
        v = source @ self.w_v
        scale = 1.0 / math.sqrt(self.head_dim)
        head_outputs = []
        weights = []
        for h in range(self.heads):
            cols = slice(h * self.head_dim, (h + 1) * self.head_dim)
            qh = q[:, cols]
            kh = k[:, cols]
            vh = v[:, cols]
            probs = softmax_rows((qh @ kh.T) * scale, mask=mask)
            weights.append(probs.data.copy())
            head_outputs.append(probs @ vh)
        merged = head_outputs[0] if self.heads == 1 else concat(head_outputs, axis=1)
        return self.out(merged), np.stack(weights)


class TransformerBlock(Module):
    """Pre-norm residual block: z' = z + MSA(LN(z)); z'' = z' + MLP(LN(z'))."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator,
                 mlp_ratio: int = 4, std: float = INIT_STD):
        super().__init__()
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, rng, std=std)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(d, mlp_ratio * d, rng, std=std)
        self.fc2 = Linear(mlp_ratio * d, d, rng, std=std)

    def __call__(self, z: Tensor, mask: Optional[np.ndarray] = None) -> Tuple[Tensor, np.ndarray]:
        attended, weights = self.attn(self.ln1(z), mask=mask)
        z = z + attended
        z = z + self.fc2(gelu(self.fc1(self.ln2(z))))
        return z, weights


def causal_mask(length: int) -> np.ndarray:
    """Boolean lower-triangular mask; True means the key is visible."""
    return np.tril(np.ones((length, length), dtype=bool))
