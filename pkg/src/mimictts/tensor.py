"""Minimal dense-tensor numerics with reverse-mode automatic differentiation.

Values are numpy arrays; the graph is recorded eagerly whenever an input
has ``requires_grad`` and gradient recording is enabled. Every forward op
checks its result for NaN/Inf and raises instead of propagating silently.
"""

import contextlib
import contextvars

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_grad_enabled = contextvars.ContextVar("mimictts_grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled():
    return _grad_enabled.get()


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A dense array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64 if not isinstance(data, np.ndarray) else None)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def copy(self):
        return Tensor(self.data.copy(), requires_grad=self.requires_grad)

    # -- operator sugar -------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return max_(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    def abs(self):
        return abs_(self)

    def backward(self):
        """Reverse-mode sweep from a scalar; accumulates into ``.grad``."""
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.data.shape}")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None:
                continue
            node._backward(node.grad)
            # graph edges are one-shot; free intermediates eagerly
            node._backward = None
            node._parents = ()


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    arr = np.asarray(value, dtype=dtype)
    if arr.dtype.kind not in "fiu":
        arr = arr.astype(np.float64)
    return Tensor(arr)


def _toposort(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _accumulate(tensor, grad):
    # grads are never mutated in place, so aliasing the incoming array is safe
    if tensor.grad is None:
        tensor.grad = grad
    else:
        tensor.grad = tensor.grad + grad


def _unbroadcast(grad, shape):
    """Sum a broadcasted gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _make(data, op, parents, backward):
    """Wrap an op result, recording the edge when gradients are live."""
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise binary ops ---------------------------------------------

def _coerce_pair(a, b):
    # keep python scalars in the other operand's dtype so float32 graphs stay float32
    if isinstance(a, Tensor) and isinstance(b, (int, float)):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and isinstance(a, (int, float)):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    a = as_tensor(a)
    b = as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"operands not broadcast-compatible: {a.shape} vs {b.shape}") from None
    return a, b


def add(a, b):
    a, b = _coerce_pair(a, b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, "add", (a, b), backward)


def sub(a, b):
    a, b = _coerce_pair(a, b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(data, "sub", (a, b), backward)


def mul(a, b):
    a, b = _coerce_pair(a, b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, "mul", (a, b), backward)


def div(a, b):
    a, b = _coerce_pair(a, b)
    data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, "div", (a, b), backward)


def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires ndim >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _make(data, "matmul", (a, b), backward)


# -- elementwise unary ops ------------------------------------------------

def relu(x):
    x = as_tensor(x)
    data = np.maximum(x.data, 0)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * (x.data > 0))

    return _make(data, "relu", (x,), backward)


def sigmoid(x):
    x = as_tensor(x)
    data = 0.5 * (np.tanh(0.5 * x.data) + 1.0)  # stable for large |x|

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * data * (1.0 - data))

    return _make(data, "sigmoid", (x,), backward)


def tanh(x):
    x = as_tensor(x)
    data = np.tanh(x.data)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * (1.0 - data * data))

    return _make(data, "tanh", (x,), backward)


def exp(x):
    x = as_tensor(x)
    data = np.exp(x.data)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * data)

    return _make(data, "exp", (x,), backward)


def log(x):
    x = as_tensor(x)
    data = np.log(x.data)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g / x.data)

    return _make(data, "log", (x,), backward)


def sqrt(x):
    x = as_tensor(x)
    data = np.sqrt(x.data)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * 0.5 / data)

    return _make(data, "sqrt", (x,), backward)


def abs_(x):
    x = as_tensor(x)
    data = np.abs(x.data)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * np.sign(x.data))

    return _make(data, "abs", (x,), backward)


def power(x, exponent):
    x = as_tensor(x)
    p = float(exponent)
    data = x.data**p

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g * p * x.data ** (p - 1.0))

    return _make(data, "power", (x,), backward)


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            _accumulate(x, data * (g - dot))

    return _make(data, "softmax", (x,), backward)


# -- reductions -----------------------------------------------------------

def _restore_axes(g, axis, keepdims, shape):
    if keepdims or axis is None:
        return np.broadcast_to(g, shape) if g.shape != shape else g
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(shape) for a in axes)
    g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, _restore_axes(np.asarray(g), axis, keepdims, x.shape).copy())

    return _make(data, "sum", (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else np.prod(
        [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward(g):
        if x.requires_grad:
            _accumulate(x, _restore_axes(np.asarray(g), axis, keepdims, x.shape) / count)

    return _make(data, "mean", (x,), backward)


def max_(x, axis=None, keepdims=False):
    """Reduce-max; gradient splits equally across tied maxima."""
    x = as_tensor(x)
    data = x.data.max(axis=axis, keepdims=keepdims)

    def backward(g):
        if x.requires_grad:
            full = x.data.max(axis=axis, keepdims=True)
            mask = (x.data == full).astype(x.data.dtype)
            mask /= mask.sum(axis=axis, keepdims=True)
            _accumulate(x, _restore_axes(np.asarray(g), axis, keepdims, x.shape) * mask)

    return _make(data, "max", (x,), backward)


# -- shape ops --------------------------------------------------------------

def reshape(x, shape):
    x = as_tensor(x)
    data = x.data.reshape(shape)
    old_shape = x.shape

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g.reshape(old_shape))

    return _make(data, "reshape", (x,), backward)


def transpose(x, axes=None):
    x = as_tensor(x)
    data = x.data.transpose(axes)
    inverse = None if axes is None else np.argsort(axes)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g.transpose(inverse))

    return _make(data, "transpose", (x,), backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat requires at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                _accumulate(t, piece)

    return _make(data, "concat", tuple(tensors), backward)


def index(x, key):
    """Basic slicing (ints, slices, tuples thereof); use take() for arrays."""
    x = as_tensor(x)
    data = x.data[key]

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[key] = g
            _accumulate(x, full)

    return _make(data, "index", (x,), backward)


def take(x, indices, axis=0):
    """Gather along an axis with an integer index array (repeats allowed)."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    data = np.take(x.data, idx, axis=axis)

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, idx.reshape(-1), np.moveaxis(g, axis, 0).reshape((-1,) + moved.shape[1:]))
            _accumulate(x, full)

    return _make(data, "take", (x,), backward)


def gather_rows(table, row_ids):
    """Select rows of a 2-D table (embedding lookup)."""
    table = as_tensor(table)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D table, got {table.shape}")
    return take(table, np.asarray(row_ids, dtype=np.intp), axis=0)


def l1_sum(a, b):
    """Sum of absolute differences, sum(|a - b|)."""
    return sum_(abs_(sub(a, b)))


def gradients(loss, params):
    """Backward from a scalar loss; returns a gradient map over ``params``.

    Parameters unreachable from the loss get zero gradients. Parameter
    ``.grad`` slots are consumed (reset to None).
    """
    loss.backward()
    out = {}
    for name, p in params.items():
        out[name] = Tensor(p.grad if p.grad is not None else np.zeros_like(p.data))
        p.grad = None
    return out
