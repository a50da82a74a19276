"""Dense float64 tensors with reverse-mode automatic differentiation.

Ops build a define-by-run graph: every result produced from a tracked
tensor remembers its inputs and a backward rule. ``backward(loss)``
linearizes the graph into a :class:`Tape` (inputs always precede their
consumers) and replays it once in reverse, accumulating gradients
additively so a tensor used on several paths receives the sum.

Everything stays in 64-bit and single-threaded per graph; tensors that do
not track gradients are never mutated by the engine and can be shared
freely.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ContractError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """N-dimensional row-major float64 array with optional grad tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_inputs", "_backward_fn")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._inputs = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._item_err()

    def _item_err(self):
        raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def abs(self):
        return abs_(self)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _wrap(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(data):
    return Tensor(data, requires_grad=False)


def parameter(data):
    return Tensor(data, requires_grad=True)


def _make_op(data, inputs, backward_fn):
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = inputs
        out._backward_fn = backward_fn
    return out


class Tape:
    """Ordered record of the ops reachable from one output.

    ``ops`` lists op-producing tensors with inputs always before their
    consumers; the reverse sweep therefore visits every operation exactly
    once.
    """

    def __init__(self, ops):
        self.ops = ops

    @classmethod
    def trace(cls, root):
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or node._backward_fn is None:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._inputs:
                if parent._backward_fn is not None:
                    stack.append((parent, False))
        return cls(order)

    def run_backward(self, root):
        pending = {id(root): np.ones_like(root.data)}
        for node in reversed(self.ops):
            grad_out = pending.pop(id(node), None)
            if grad_out is None:
                continue
            node.grad = grad_out if node.grad is None else node.grad + grad_out
            for parent, grad_in in zip(node._inputs, node._backward_fn(grad_out)):
                if grad_in is None or not parent.requires_grad:
                    continue
                if parent._backward_fn is None:
                    parent.grad = grad_in if parent.grad is None else parent.grad + grad_in
                else:
                    acc = pending.get(id(parent))
                    pending[id(parent)] = grad_in if acc is None else acc + grad_in


def backward(loss):
    """Populate ``grad`` on every tracked tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._backward_fn is None:
        if loss.requires_grad:
            g = np.ones_like(loss.data)
            loss.grad = g if loss.grad is None else loss.grad + g
            return
        raise ContractError("backward() on a tensor with no recorded operations")
    Tape.trace(loss).run_backward(loss)


# -- shape plumbing ---------------------------------------------------------

def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, opname):
    if a.shape == b.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, (tuple, list)):
        return tuple(a % ndim for a in axis)
    return axis % ndim


# -- elementwise ops --------------------------------------------------------

def add(a, b):
    _check_broadcast(a, b, "add")
    return _make_op(a.data + b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    _check_broadcast(a, b, "sub")
    return _make_op(a.data - b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    _check_broadcast(a, b, "mul")
    return _make_op(a.data * b.data, (a, b),
                    lambda g: (_unbroadcast(g * b.data, a.shape),
                               _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    _check_broadcast(a, b, "div")
    return _make_op(a.data / b.data, (a, b),
                    lambda g: (_unbroadcast(g / b.data, a.shape),
                               _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a):
    return _make_op(-a.data, (a,), lambda g: (-g,))


def scale(a, factor):
    """Multiply by a plain float; gradient stops here when factor == 0."""
    factor = float(factor)
    return _make_op(a.data * factor, (a,),
                    lambda g: (g * factor if factor != 0.0 else None,))


def abs_(a):
    # Subgradient at 0 is 0 (sign(0) == 0).
    return _make_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a):
    return _make_op(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0.0),))


def exp(a):
    out_data = np.exp(a.data)
    return _make_op(out_data, (a,), lambda g: (g * out_data,))


def sqrt(a):
    out_data = np.sqrt(a.data)
    return _make_op(out_data, (a,), lambda g: (g * 0.5 / out_data,))


# -- structural ops ---------------------------------------------------------

def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dims do not broadcast: {a.shape} x {b.shape}") from None

    if b.ndim == 2:
        # Batched-left times plain matrix folds into one GEMM.
        k, n = b.shape
        lead = a.shape[:-1]

        def back(g):
            g2 = g.reshape(-1, n)
            da = (g2 @ b.data.T).reshape(a.shape)
            db = a.data.reshape(-1, k).T @ g2
            return da, db

        out = (a.data.reshape(-1, k) @ b.data).reshape(lead + (n,))
        return _make_op(out, (a, b), back)

    if a.ndim == 2:
        # Plain matrix times batched-right: contract via tensordot, one GEMM.
        m = a.shape[0]
        axis = b.ndim - 2

        def back(g):
            da = np.tensordot(g, b.data, axes=(list(range(axis)) + [b.ndim - 1],
                                               list(range(axis)) + [b.ndim - 1]))
            db = np.moveaxis(np.tensordot(a.data.T, g, axes=(1, axis)), 0, axis)
            return da, db

        out = np.moveaxis(np.tensordot(a.data, b.data, axes=(1, axis)), 0, axis)
        return _make_op(out, (a, b), back)

    def back(g):
        da = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        db = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return da, db

    return _make_op(a.data @ b.data, (a, b), back)


def transpose(a, axes):
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return _make_op(np.transpose(a.data, axes), (a,),
                    lambda g: (np.transpose(g, inv),))


def swap_axes(a, ax1, ax2):
    perm = list(range(a.ndim))
    ax1, ax2 = ax1 % a.ndim, ax2 % a.ndim
    perm[ax1], perm[ax2] = perm[ax2], perm[ax1]
    return transpose(a, tuple(perm))


def reshape(a, shape):
    shape = tuple(shape)
    return _make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a, shape):
    shape = tuple(shape)
    _check_broadcast(a, Tensor(np.empty(shape)), "broadcast_to")
    return _make_op(np.broadcast_to(a.data, shape).copy(), (a,),
                    lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors, axis):
    tensors = [_wrap(t) for t in tensors]
    axis = _norm_axis(axis, tensors[0].ndim)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
                i != axis and t.shape[i] != ref[i] for i in range(len(ref))):
            raise DimensionError(
                f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, offsets, axis=axis))

    return _make_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def getitem(a, idx):
    out_data = a.data[idx]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make_op(np.array(out_data, dtype=np.float64, copy=True), (a,), back)


# -- reductions -------------------------------------------------------------

def _expand_reduced(g, in_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, in_shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, in_shape)


def reduce_sum(a, axis=None, keepdims=False):
    axis = _norm_axis(axis, a.ndim)
    return _make_op(a.data.sum(axis=axis, keepdims=keepdims), (a,),
                    lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),))


def reduce_mean(a, axis=None, keepdims=False):
    axis = _norm_axis(axis, a.ndim)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out_data.size, 1)
    return _make_op(out_data, (a,),
                    lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,))


# -- fused neural ops -------------------------------------------------------

def softmax(a, axis=-1):
    axis = _norm_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make_op(y, (a,), back)


def layer_norm(x, gain, bias, eps):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be > 0, got {eps}")
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise DimensionError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {width}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def back(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _make_op(xhat * gain.data + bias.data, (x, gain, bias), back)


def linear(x, weight, bias=None):
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)
