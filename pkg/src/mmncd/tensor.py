"""Dense float64 tensors with reverse-mode automatic differentiation.

Values are numpy arrays in row-major order; the graph is built eagerly as
operations execute and consists of plain Python objects linked parent-ward,
so dropping the loss node frees the whole graph. Every public operation
checks its result for NaN/Inf and raises :class:`NumericalError` naming the
offending operation, which is what the trainer surfaces on abort.

Gradient correctness is verifiable through :func:`finite_difference_check`,
which compares backpropagated gradients against centered differences.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateVectorError, NumericalError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (fast inference path)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """A float64 array plus optional links into the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])


class Parameter(Tensor):
    """A named trainable leaf; its gradient buffer always matches its shape."""

    __slots__ = ("name",)

    def __init__(self, name: str, value):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value) -> Tensor:
    """Wrap a value as a non-differentiable tensor."""
    return Tensor(value)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward, op_name: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericalError(f"non-finite values produced by {op_name}")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _node(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _node(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _node(data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _node(data, (a, b), backward, "div")


def power(a, exponent: float) -> Tensor:
    """Elementwise a**exponent for a constant exponent."""
    a = as_tensor(a)
    exponent = float(exponent)
    data = a.data ** exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _node(data, (a,), backward, "power")


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast as a batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul shapes do not align: {a.data.shape} x {b.data.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul shapes do not align: {a.data.shape} x {b.data.shape}") from exc

    def backward(g):
        ga = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape)
        gb = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape)
        return ga, gb

    return _node(data, (a, b), backward, "matmul")


def swap_last_axes(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim < 2:
        raise ShapeError(f"need at least 2 axes to swap, got shape {a.data.shape}")
    data = a.data.swapaxes(-1, -2)

    def backward(g):
        return (g.swapaxes(-1, -2),)

    return _node(data, (a,), backward, "swap_last_axes")


def affine(x, w, b) -> Tensor:
    """x @ w + b with the bias broadcast over rows."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if b.data.ndim != 1 or w.data.ndim != 2 or b.data.shape[0] != w.data.shape[1]:
        raise ShapeError(f"affine shapes do not align: x {x.data.shape}, w {w.data.shape}, b {b.data.shape}")
    return add(matmul(x, w), b)


def relu(x) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    x = as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def backward(g):
        return (g * (x.data > 0.0),)

    return _node(data, (x,), backward, "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    data = np.where(x.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(x.data))),
                    np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def backward(g):
        return (g * data * (1.0 - data),)

    return _node(data, (x,), backward, "sigmoid")


def log(x) -> Tensor:
    x = as_tensor(x)
    data = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _node(data, (x,), backward, "log")


def exp(x) -> Tensor:
    x = as_tensor(x)
    data = np.exp(x.data)

    def backward(g):
        return (g * data,)

    return _node(data, (x,), backward, "exp")


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes through strictly inside the bounds."""
    x = as_tensor(x)
    data = np.clip(x.data, lo, hi)

    def backward(g):
        return (g * ((x.data >= lo) & (x.data <= hi)),)

    return _node(data, (x,), backward, "clamp")


def tensor_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _node(data, (x,), backward, "sum")


def tensor_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else x.data.shape[axis]

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape) / count,)

    return _node(data, (x,), backward, "mean")


def softmax_rows(x) -> Tensor:
    """Softmax along the last axis, stabilised by a per-row max shift."""
    x = as_tensor(x)
    if x.data.ndim < 1 or x.data.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got shape {x.data.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _node(y, (x,), backward, "softmax_rows")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.data.shape),)

    return _node(data, (x,), backward, "reshape")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return _node(data, tuple(tensors), backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack of an empty sequence")
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(data, tuple(tensors), backward, "stack")


def take_rows(x, indices) -> Tensor:
    """Select rows (axis 0) by index."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    data = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(data, (x,), backward, "take_rows")


def take_per_row(x, column_indices) -> Tensor:
    """From a 2-D tensor pick one column per row: out[i] = x[i, col[i]]."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"take_per_row needs a 2-D tensor, got shape {x.data.shape}")
    cols = np.asarray(column_indices, dtype=np.intp)
    rows = np.arange(x.data.shape[0])
    data = x.data[rows, cols]

    def backward(g):
        full = np.zeros_like(x.data)
        full[rows, cols] = g
        return (full,)

    return _node(data, (x,), backward, "take_per_row")


def scatter_rows(x, indices, num_rows: int) -> Tensor:
    """Embed rows of x at the given positions of a zero tensor with num_rows rows."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    data = np.zeros((num_rows,) + x.data.shape[1:], dtype=np.float64)
    data[idx] = x.data

    def backward(g):
        return (g[idx],)

    return _node(data, (x,), backward, "scatter_rows")


def cosine_similarity(u, v) -> Tensor:
    """cos(u, v) for 1-D vectors, differentiable through both arguments."""
    u, v = as_tensor(u), as_tensor(v)
    if u.data.ndim != 1 or u.data.shape != v.data.shape:
        raise ShapeError(f"cosine needs matching 1-D vectors, got {u.data.shape} and {v.data.shape}")
    if np.linalg.norm(u.data) < 1e-12 or np.linalg.norm(v.data) < 1e-12:
        raise DegenerateVectorError("cosine similarity of a (near-)zero vector is undefined")
    dot = (u * v).sum()
    return div(dot, power(mul((u * u).sum(), (v * v).sum()), 0.5))


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into .grad over the whole reachable graph."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    frontier: list[tuple[Tensor, bool]] = [(loss, False)]
    while frontier:
        node, expanded = frontier.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        frontier.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                frontier.append((parent, False))

    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad = loss.grad + np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, grad in zip(node._parents, node._backward(node.grad)):
            if grad is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += grad


def zero_gradients(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-5) -> float:
    """Max relative error between backprop gradients of f() and centered differences.

    The relative error denominator is max(|analytic|, |numeric|, 1e-8) per
    coordinate. f is re-evaluated twice per parameter coordinate and must be
    deterministic.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    zero_gradients(params)
    backward(f())
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, grads in zip(params, analytic):
        flat_value = p.data.reshape(-1)
        flat_grad = grads.reshape(-1)
        for i in range(flat_value.size):
            original = flat_value[i]
            flat_value[i] = original + h
            upper = f().item()
            flat_value[i] = original - h
            lower = f().item()
            flat_value[i] = original
            numeric = (upper - lower) / (2.0 * h)
            denom = max(abs(flat_grad[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(flat_grad[i] - numeric) / denom)
    return worst
