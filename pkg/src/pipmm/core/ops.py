"""
Neural-network operations on Tensors: softmax, layer normalization, GELU and
embedding lookup. Each has a fused forward/backward pair.
"""

import math
from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import ndtr

from ..errors import NumericError, ShapeError
from .tensor import Function, Tensor, as_tensor

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class SoftmaxRows(Function):
    def forward(self, x, mask=None):
        if not np.all(np.isfinite(x)):
            raise NumericError("softmax input contains NaN or Inf")
        z = x if mask is None else np.where(mask, x, -np.inf)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


class LogSoftmaxRows(Function):
    def forward(self, x):
        if not np.all(np.isfinite(x)):
            raise NumericError("log-softmax input contains NaN or Inf")
        z = x - x.max(axis=-1, keepdims=True)
        self.log_norm = np.log(np.exp(z).sum(axis=-1, keepdims=True))
        out = z - self.log_norm
        self.probs = np.exp(out)
        return out

    def backward(self, grad):
        return (grad - self.probs * grad.sum(axis=-1, keepdims=True),)


class LayerNorm(Function):
    def forward(self, x, gamma, beta, eps=1e-5):
        d = x.shape[-1]
        if gamma.shape != (d,) or beta.shape != (d,):
            raise ShapeError(
                f"layer_norm affine shape mismatch: x {x.shape}, gamma {gamma.shape}, "
                f"beta {beta.shape}", x.shape, gamma.shape, beta.shape,
            )
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        if eps == 0 and np.any(var == 0):
            raise NumericError(f"layer_norm degenerate variance (d={d}, eps=0)")
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.inv
        return self.xhat * gamma + beta

    def backward(self, grad):
        _, gamma, _ = self.inputs
        lead = tuple(range(grad.ndim - 1))
        dgamma = (grad * self.xhat).sum(axis=lead)
        dbeta = grad.sum(axis=lead)
        dxhat = grad * gamma.data
        dx = self.inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - self.xhat * (dxhat * self.xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta


class Gelu(Function):
    def forward(self, x):
        self.cdf = ndtr(x)
        return x * self.cdf

    def backward(self, grad):
        x = self.inputs[0].data
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (grad * (self.cdf + x * pdf),)


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Row-wise softmax over the last axis with max subtraction.

    Args:
        x: Input scores
        mask: Optional boolean array; False entries get probability exactly 0

    Returns:
        Tensor whose rows are nonnegative and sum to 1
    """
    return SoftmaxRows.apply(as_tensor(x), mask=mask)


def log_softmax_rows(x: Tensor) -> Tensor:
    return LogSoftmaxRows.apply(as_tensor(x))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis with population variance, then scale and shift."""
    return LayerNorm.apply(as_tensor(x), as_tensor(gamma), as_tensor(beta), eps=eps)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    return Gelu.apply(as_tensor(x))


def embedding(table: Tensor, ids: Union[Sequence[int], np.ndarray]) -> Tensor:
    """Gather rows of ``table``; repeated ids accumulate gradient."""
    index = np.asarray(ids, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding ids out of range for table with {table.shape[0]} rows", table.shape
        )
    return table[index]
