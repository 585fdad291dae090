"""Dense tensors with reverse-mode differentiation on top of numpy.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure that pushes the output gradient back to them. Ops keep the dtype of
their inputs, so the same graph runs in float32 for training and float64 for
finite-difference verification.
"""
from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError

_GELU_C = math.sqrt(2.0 / math.pi)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        # constants keep no graph, so frozen forward passes stay cheap
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    return Tensor(arr)


def _coerce(a, b):
    """Wrap non-tensors so they adopt the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, b.dtype)
    elif not isinstance(a, Tensor):
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise

def add(a, b):
    a, b = _coerce(a, b)
    _check_broadcast("add", a, b)
    out = Tensor(a.data + b.data, _parents=(a, b))

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    out._backward = backward
    return out


def sub(a, b):
    a, b = _coerce(a, b)
    _check_broadcast("sub", a, b)
    out = Tensor(a.data - b.data, _parents=(a, b))

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    out._backward = backward
    return out


def mul(a, b):
    a, b = _coerce(a, b)
    _check_broadcast("mul", a, b)
    out = Tensor(a.data * b.data, _parents=(a, b))

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    out._backward = backward
    return out


def square(a):
    out = Tensor(a.data * a.data, _parents=(a,))
    out._backward = lambda g: _accumulate(a, 2.0 * a.data * g)
    return out


def exp(a):
    value = np.exp(a.data)
    out = Tensor(value, _parents=(a,))
    out._backward = lambda g: _accumulate(a, g * value)
    return out


def log(a):
    out = Tensor(np.log(a.data), _parents=(a,))
    out._backward = lambda g: _accumulate(a, g / a.data)
    return out


def sqrt(a):
    value = np.sqrt(a.data)
    out = Tensor(value, _parents=(a,))
    out._backward = lambda g: _accumulate(a, g * 0.5 / value)
    return out


def gelu(a):
    """tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    # x * (1 + c x^2) rather than x + c x^3: the cube underflows to denormals for small x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = Tensor(0.5 * x * (1.0 + th), _parents=(a,))

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        grad = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner
        _accumulate(a, g * grad)

    out._backward = backward
    return out


# reductions and reshaping

def sum_(a, axis=None, keepdims=False):
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), _parents=(a,))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    out._backward = backward
    return out


def mean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape):
    try:
        value = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    out = Tensor(value, _parents=(a,))
    out._backward = lambda g: _accumulate(a, g.reshape(a.shape))
    return out


def transpose(a, axes=None):
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    out = Tensor(a.data.transpose(axes), _parents=(a,))
    inverse = tuple(np.argsort(axes))
    out._backward = lambda g: _accumulate(a, g.transpose(inverse))
    return out


def getitem(a, index):
    out = Tensor(a.data[index], _parents=(a,))

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accumulate(a, full)

    out._backward = backward
    return out


def take(a, indices, axis):
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    indices = np.asarray(indices, dtype=np.intp)
    out = Tensor(np.take(a.data, indices, axis=axis), _parents=(a,))

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        _accumulate(a, full)

    out._backward = backward
    return out


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    out = Tensor(value, _parents=tuple(tensors))
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    out._backward = backward
    return out


def stack(tensors, axis=0):
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# linear algebra

def matmul(a, b):
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(np.matmul(a.data, b.data), _parents=(a, b))

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    out._backward = backward
    return out


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with weight stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    if len(lead) > 1:
        # one GEMM instead of a stack of small batched products
        x = reshape(x, (-1, x.shape[-1]))
    y = matmul(x, weight)
    if bias is not None:
        y = add(y, bias)
    return reshape(y, lead + (weight.shape[1],)) if len(lead) > 1 else y


# normalizations

def softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p, _parents=(a,))

    def backward(g):
        _accumulate(a, p * (g - (g * p).sum(axis=axis, keepdims=True)))

    out._backward = backward
    return out


def log_softmax(a, axis=-1):
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    value = shifted - lse
    out = Tensor(value, _parents=(a,))

    def backward(g):
        p = np.exp(value)
        _accumulate(a, g - p * g.sum(axis=axis, keepdims=True))

    out._backward = backward
    return out


def layer_norm(a, gamma=None, beta=None, eps=1e-5):
    """Normalize over the last axis; optional affine parameters."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat, _parents=(a,))

    def backward(g):
        gx = inv * (g - g.mean(axis=-1, keepdims=True) - xhat * (g * xhat).mean(axis=-1, keepdims=True))
        _accumulate(a, gx)

    out._backward = backward
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


def l2_normalize(a, axis=-1, eps=1e-12):
    x = a.data
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    safe = np.maximum(norm, eps)
    y = x / safe
    out = Tensor(y, _parents=(a,))

    def backward(g):
        _accumulate(a, (g - y * (g * y).sum(axis=axis, keepdims=True)) / safe)

    out._backward = backward
    return out


# graph traversal

def _topo_order(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every tensor that ``loss`` depends on."""
    from ..errors import GraphError

    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad or loss._backward is None:
        raise GraphError("backward called on a tensor that was not produced by a differentiable forward pass")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_topo_order(loss)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
