"""Dense n-dimensional arrays with a reverse-mode gradient tape.

Every tensor wraps a row-major numpy buffer. Operations on tensors that
require gradients record their parents and a backward closure; calling
:func:`backward` on a scalar walks the recorded graph in reverse
topological order and accumulates gradients into the leaves.

Training runs in float32. :func:`float64_mode` switches the default dtype
for freshly created tensors, which the gradient-check harness relies on.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "parameter",
    "backward",
    "float64_mode",
    "get_default_dtype",
    "matmul",
    "softmax",
    "layer_norm",
    "gelu",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "sqrt",
    "absolute",
    "l1",
    "concat",
    "mask_zero",
    "ShapeError",
]


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


_state = threading.local()


def get_default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def float64_mode():
    """Create new tensors as float64 inside the block (gradient checking)."""
    prev = get_default_dtype()
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or get_default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def _node(cls, data, parents, backward_fn, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, -_lift(other, self))

    def __rsub__(self, other):
        return add(_lift(other, self), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad=False, dtype=None):
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad, dtype)


def parameter(data, name=None):
    return Tensor(data, requires_grad=True, name=name)


def _lift(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype), dtype=like.dtype)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ------------------------------------------------


def add(a, b):
    a = tensor(a)
    b = _lift(b, a)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._node(a.data + b.data, (a, b), bw, "add")


def mul(a, b):
    a = tensor(a)
    b = _lift(b, a)
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._node(a.data * b.data, (a, b), bw, "mul")


def div(a, b):
    a = tensor(a)
    b = _lift(b, a)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return Tensor._node(out, (a, b), bw, "div")


def power(a, exponent):
    exponent = float(exponent)

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return Tensor._node(a.data**exponent, (a,), bw, "pow")


def exp(a):
    out = np.exp(a.data)
    return Tensor._node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    return Tensor._node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return Tensor._node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def absolute(a):
    return Tensor._node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sigmoid(a):
    out = special.expit(a.data)
    return Tensor._node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a):
    """log(1 + exp(x)), evaluated without overflow."""
    out = np.logaddexp(a.data.dtype.type(0), a.data)
    return Tensor._node(out, (a,), lambda g: (g * special.expit(a.data),), "softplus")


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def gelu(a):
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))
    out = x * cdf

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return Tensor._node(out.astype(x.dtype, copy=False), (a,), bw, "gelu")


def mask_zero(a, mask):
    """Set positions where ``mask`` is true to exactly zero.

    Unmasked values pass through bit-for-bit, and so does their gradient.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"mask_zero: mask shape {mask.shape} does not match {a.shape}")
    zero = a.data.dtype.type(0)

    def bw(g):
        return (np.where(mask, zero, g),)

    return Tensor._node(np.where(mask, zero, a.data), (a,), bw, "mask_zero")


# -- reductions and shape ops ----------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._node(np.asarray(out, dtype=a.dtype), (a,), bw, "sum")


def tmean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return Tensor._node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: bad permutation {axes} for rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return Tensor._node(
        out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),), "transpose"
    )


def swapaxes(a, ax1, ax2):
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def getitem(a, index):
    out = np.ascontiguousarray(a.data[index])

    def bw(g):
        full = np.zeros_like(a.data)
        if _has_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return Tensor._node(out, (a,), bw, "slice")


def _has_advanced(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors, axis=0):
    tensors = [tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return Tensor._node(out, tuple(tensors), bw, "concat")


# -- linear algebra and normalisation --------------------------------------


def matmul(a, b):
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return Tensor._node(a.data @ b.data, (a, b), bw, "matmul")


def softmax(a, axis=-1):
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for rank {a.ndim}")
    out = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def bw(g):
        gx = g - (g * out).sum(axis=axis, keepdims=True)
        gx *= out
        return (gx,)

    return Tensor._node(out, (a,), bw, "softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis (population variance), then scale and shift."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must match last axis {c}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return Tensor._node(out.astype(x.dtype, copy=False), (x, gamma, beta), bw, "layer_norm")


def l1(a, b):
    """Mean absolute difference."""
    a, b = tensor(a), tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"l1: shapes {a.shape} and {b.shape} differ")
    return tmean(absolute(a - b))


# -- the tape --------------------------------------------------------------


class Tape:
    """Recorded operations reachable from a root, parents before children."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def record(cls, root):
        order, seen = [], set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = Tape.record(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
