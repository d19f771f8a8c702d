"""
Dense float64 tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array. Differentiable operations are Function
subclasses: ``apply`` runs ``forward`` on raw arrays and, when any input
requires gradients, links the output to the function that produced it.
``Tape.record`` turns that graph into a topologically ordered op list which
``backward`` walks exactly once in reverse.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import ContractError, ShapeError
from . import profiling

logger = logging.getLogger(__name__)

_grad_mode = threading.local()

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, 'enabled', True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording for the current thread."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Function:
    """
    Base class for differentiable operations.

    ``forward`` receives the input arrays and returns the output array;
    ``backward`` receives dL/d(output) and returns one gradient (or None) per
    input, each with the shape of that input.
    """

    def __init__(self, *inputs: 'Tensor'):
        self.inputs = inputs
        self.output_id: Optional[int] = None

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"{type(self).__name__}.backward")

    @classmethod
    def apply(cls, *inputs: 'Tensor', **kwargs: Any) -> 'Tensor':
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        result = Tensor._wrap(out, fn if requires_grad else None)
        if requires_grad:
            fn.output_id = id(result)
        return result

    @staticmethod
    def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        """Sum out broadcast dimensions so ``grad`` matches ``shape``."""
        if grad.shape == shape:
            return grad
        while grad.ndim > len(shape):
            grad = grad.sum(axis=0)
        for axis, extent in enumerate(shape):
            if extent == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


class Tensor:
    """A float64 array that can participate in a differentiation tape."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.creator: Optional[Function] = None
        self.name = name
        profiling.track_tensor(self)

    @classmethod
    def _wrap(cls, array: np.ndarray, creator: Optional[Function]) -> 'Tensor':
        out = cls.__new__(cls)
        out.data = np.asarray(array, dtype=np.float64)
        out.requires_grad = creator is not None
        out.grad = None
        out.creator = creator
        out.name = None
        profiling.track_tensor(out)
        return out

    # --- convenience ---
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{req}{nm})"

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> 'Tensor':
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # --- arithmetic ---
    def __add__(self, other: Union['Tensor', float]) -> 'Tensor':
        return Add.apply(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other: Union['Tensor', float]) -> 'Tensor':
        return Sub.apply(self, as_tensor(other))

    def __rsub__(self, other: Union['Tensor', float]) -> 'Tensor':
        return Sub.apply(as_tensor(other), self)

    def __mul__(self, other: Union['Tensor', float]) -> 'Tensor':
        return Mul.apply(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other: float) -> 'Tensor':
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a scalar constant")
        return Mul.apply(self, as_tensor(1.0 / other))

    def __neg__(self) -> 'Tensor':
        return Neg.apply(self)

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return MatMul.apply(self, other)

    def __getitem__(self, idx: Any) -> 'Tensor':
        return GetItem.apply(self, idx=idx)

    @property
    def T(self) -> 'Tensor':
        return Transpose.apply(self)

    def reshape(self, *shape: int) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> 'Tensor':
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> 'Tensor':
        count = self.data.size if axis is None else self.data.shape[axis]
        return Sum.apply(self, axis=axis, keepdims=keepdims) * (1.0 / count)

    def exp(self) -> 'Tensor':
        return Exp.apply(self)

    def log(self) -> 'Tensor':
        return Log.apply(self)

    def sin(self) -> 'Tensor':
        return Sin.apply(self)

    def backward(self) -> 'Tape':
        """Populate ``grad`` on every reachable leaf that requires gradients."""
        return backward(self)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


class Tape:
    """Ordered record of the differentiable ops that produced an output."""

    def __init__(self, nodes: List[Function]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def record(cls, output: Tensor) -> 'Tape':
        order: List[Function] = []
        if output.creator is None:
            return cls(order)
        visited = set()
        stack: List[Tuple[Function, bool]] = [(output.creator, False)]
        while stack:
            fn, expanded = stack.pop()
            if expanded:
                order.append(fn)
                continue
            if id(fn) in visited:
                continue
            visited.add(id(fn))
            stack.append((fn, True))
            for inp in reversed(fn.inputs):
                if inp.creator is not None and id(inp.creator) not in visited:
                    stack.append((inp.creator, False))
        return cls(order)

    def is_topological(self) -> bool:
        """Every op's producing inputs appear before it."""
        position = {id(fn): i for i, fn in enumerate(self.nodes)}
        for i, fn in enumerate(self.nodes):
            for inp in fn.inputs:
                if inp.creator is not None and position.get(id(inp.creator), i) >= i:
                    return False
        return True

    def run_backward(self, output: Tensor) -> None:
        grads: Dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        if output.creator is None:
            _accumulate(output, grads[id(output)])
            return
        for fn in reversed(self.nodes):
            grad = grads.pop(fn.output_id, None)
            if grad is None:
                continue
            input_grads = fn.backward(grad)
            for inp, g in zip(fn.inputs, input_grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.creator is None:
                    _accumulate(inp, g)
                else:
                    key = id(inp)
                    grads[key] = grads[key] + g if key in grads else g


def _accumulate(leaf: Tensor, grad: np.ndarray) -> None:
    if leaf.grad is None:
        leaf.grad = np.array(grad, dtype=np.float64)
    else:
        leaf.grad = leaf.grad + grad


def backward(loss: Tensor) -> Tape:
    """Reverse-mode sweep from a scalar loss; grads accumulate additively."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.record(loss)
    tape.run_backward(loss)
    return tape


# --- primitive functions -------------------------------------------------


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return self.unbroadcast(grad, a.shape), self.unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        a, b = self.inputs
        return self.unbroadcast(grad, a.shape), self.unbroadcast(-grad, b.shape)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return (self.unbroadcast(grad * b.data, a.shape),
                self.unbroadcast(grad * a.data, b.shape))


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(
                f"matmul dimension mismatch: {a.shape} @ {b.shape}", a.shape, b.shape
            )
        profiling.record_matmul(a.shape[0], a.shape[1], b.shape[1])
        return a @ b

    def backward(self, grad):
        a, b = self.inputs
        return grad @ b.data.T, a.data.T @ grad


class Transpose(Function):
    def forward(self, a):
        return a.T

    def backward(self, grad):
        return (grad.T,)


class Reshape(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class GetItem(Function):
    def forward(self, a, idx):
        self.idx = idx
        return np.array(a[idx])

    def backward(self, grad):
        full = np.zeros_like(self.inputs[0].data)
        np.add.at(full, self.idx, grad)
        return (full,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.extents = [arr.shape[axis] for arr in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        bounds = np.cumsum(self.extents)[:-1]
        return tuple(np.split(grad, bounds, axis=self.axis))


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.axis = axis
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        shape = self.inputs[0].shape
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, shape).copy(),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        return np.log(a)

    def backward(self, grad):
        return (grad / self.inputs[0].data,)


class Sin(Function):
    def forward(self, a):
        return np.sin(a)

    def backward(self, grad):
        return (grad * np.cos(self.inputs[0].data),)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along ``axis``; zero-length pieces are allowed."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat shape mismatch: {ref} vs {t.shape}", ref, t.shape)
    return Concat.apply(*tensors, axis=axis)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)
