"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable primitive builds its output through :func:`make_result`,
which links the output to its parents and stores a closure mapping the output
gradient to one gradient per parent. :class:`Tape` orders those links for the
backward sweep.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

_state = threading.local()


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype() -> np.dtype:
    """Storage dtype for newly created tensors in the current thread."""
    return _get("dtype", np.dtype(np.float32))


def is_grad_enabled() -> bool:
    return _get("grad_enabled", True)


@contextlib.contextmanager
def check_mode():
    """Run the enclosed block with 64-bit storage.

    Used by gradient verification only; training runs stay in float32.
    """
    previous = default_dtype()
    _state.dtype = np.dtype(np.float64)
    try:
        yield
    finally:
        _state.dtype = previous


@contextlib.contextmanager
def no_grad():
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _as_array(data: ArrayLike, dtype: Optional[np.dtype] = None) -> np.ndarray:
    dtype = dtype or default_dtype()
    arr = np.asarray(data)
    if arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An n-dimensional float array that can take part in backpropagation."""

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    # -- basic properties ------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff ----------------------------------------------------------
    def backward(self, grad: Optional[ArrayLike] = None) -> "Tape":
        if grad is None:
            if self.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        tape = Tape.record(self)
        tape.backward(np.asarray(grad, dtype=self.dtype).reshape(self.shape))
        return tape

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(_as_array(value))


def make_result(data: np.ndarray, parents: Iterable[Tensor],
                backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap ``data`` as the output of a primitive with the given parents.

    ``backward`` receives the output gradient and returns one gradient (or
    ``None``) per parent, already shaped like the parent or broadcastable to it.
    """
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    data = np.asarray(data)
    out.data = data if data.dtype.kind == "f" else data.astype(default_dtype())
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


class Tape:
    """Reverse topological ordering of the operations that produced a tensor."""

    def __init__(self, order: list):
        self.order = order

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        order.reverse()
        return cls(order)

    def __len__(self) -> int:
        return len(self.order)

    def backward(self, seed: np.ndarray) -> None:
        grads = {id(self.order[0]): seed}
        for node in self.order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = unbroadcast(np.asarray(pg, dtype=parent.dtype), parent.shape)
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# elementwise and reduction primitives
# ---------------------------------------------------------------------------

def _pair(a, b) -> Tuple[Tensor, Tensor]:
    a = a if isinstance(a, Tensor) else Tensor(_as_array(a, b.dtype if isinstance(b, Tensor) else None))
    b = b if isinstance(b, Tensor) else Tensor(_as_array(b, a.dtype))
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return make_result(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return make_result(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return make_result(np.where(keep, a.data, 0).astype(a.dtype), (a,), lambda g: (g * keep,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _pair(a, b)
    pick_a = a.data >= b.data
    return make_result(np.where(pick_a, a.data, b.data), (a, b),
                       lambda g: (g * pick_a, g * ~pick_a))


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.outer(g, b.data)
        gb = np.swapaxes(a.data, -1, -2) @ g if a.ndim > 1 else np.outer(a.data, g)
        return ga, gb

    return make_result(a.data @ b.data, (a, b), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return make_result(np.asarray(out, dtype=a.dtype), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return make_result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inverse = None if axes is None else np.argsort(axes)
    return make_result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result(np.asarray(a.data[index]), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    if not -ndim <= axis < ndim:
        raise IndexError(f"concat axis {axis} out of range for rank {ndim}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                       lambda g: np.split(g, sizes, axis=axis))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return make_result(np.stack([t.data for t in tensors], axis=axis), tensors,
                       lambda g: [np.take(g, i, axis=axis) for i in range(len(tensors))])


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result(np.where(cond, a.data, b.data), (a, b),
                       lambda g: (g * cond, g * ~cond))
