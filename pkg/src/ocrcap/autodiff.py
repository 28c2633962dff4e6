"""Minimal define-by-run reverse-mode differentiation over float64 numpy arrays.

Only scalar broadcasting is supported implicitly; row-wise bias addition goes
through the explicit :func:`add_bias` / :func:`linear` ops.
"""
from contextlib import contextmanager

import numpy as np

from ocrcap import kernels


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NumericalError(FloatingPointError):
    """A NaN or infinity reached a place where it must not."""


_GRAD_ENABLED = True
_SIG_LO = np.finfo(np.float64).tiny
_SIG_HI = np.nextafter(1.0, 0.0)


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def is_finite(self):
        return bool(np.isfinite(self.data).all())

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return hadamard(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return hadamard(self, reciprocal(other))
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _is_scalar(t):
    return t.data.size == 1


def _reduce_to(grad, t):
    """Collapse a gradient onto a scalar-broadcast operand."""
    if grad.shape == t.shape:
        return grad
    return np.full(t.shape, grad.sum())


def _check_same_or_scalar(op, a, b):
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ------------------------------------------------------------------ elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_or_scalar("add", a, b)

    def bw(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_same_or_scalar("sub", a, b)

    def bw(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _result(a.data - b.data, (a, b), bw)


def hadamard(a, b):
    """Element-wise product; one side may be a scalar (size-1) tensor."""
    a, b = as_tensor(a), as_tensor(b)
    _check_same_or_scalar("hadamard", a, b)

    def bw(g):
        return _reduce_to(g * b.data, a), _reduce_to(g * a.data, b)

    return _result(a.data * b.data, (a, b), bw)


mul = hadamard


def scale(a, c):
    c = float(c)

    def bw(g):
        return (g * c,)

    return _result(a.data * c, (a,), bw)


def reciprocal(a):
    y = 1.0 / a.data

    def bw(g):
        return (-g * y * y,)

    return _result(y, (a,), bw)


def sigmoid(a):
    x = a.data
    # branch-free stable form; exp argument is never positive
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep outputs strictly inside (0, 1) once float64 saturates
    y = np.clip(y, _SIG_LO, _SIG_HI)

    def bw(g):
        return (g * y * (1.0 - y),)

    return _result(y, (a,), bw)


def tanh(a):
    y = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - y * y),)

    return _result(y, (a,), bw)


def exp(a):
    y = np.exp(a.data)

    def bw(g):
        return (g * y,)

    return _result(y, (a,), bw)


def log(a):
    x = a.data

    def bw(g):
        return (g / x,)

    return _result(np.log(x), (a,), bw)


def clamp_min(a, lo):
    """max(a, lo); gradient flows only where a > lo."""
    x = a.data
    mask = x > lo

    def bw(g):
        return (g * mask,)

    return _result(np.where(mask, x, lo), (a,), bw)


# ------------------------------------------------------------------ linear algebra


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return g @ B.T, A.T @ g

    return _result(A @ B, (a, b), bw)


def transpose(a):
    def bw(g):
        return (g.T,)

    return _result(a.data.T, (a,), bw)


def add_bias(x, b):
    """Add a length-n row vector to every row of an (m, n) matrix."""
    bd = b.data.reshape(-1)
    if x.data.ndim != 2 or bd.shape[0] != x.shape[1]:
        raise ShapeError(f"add_bias: cannot add bias {b.shape} to rows of {x.shape}")

    def bw(g):
        return g, g.sum(axis=0).reshape(b.shape)

    return _result(x.data + bd, (x, b), bw)


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add_bias(y, b)


# ------------------------------------------------------------------ reductions


def _check_axis(x, axis):
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.data.ndim


def tsum(a, axis=None):
    """Sum over all elements (0-d result) or along ``axis`` (kept as size 1)."""
    if axis is None:
        shape = a.shape

        def bw(g):
            return (np.full(shape, float(g)),)

        return _result(np.asarray(a.data.sum()), (a,), bw)
    axis = _check_axis(a, axis)
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=True), (a,), bw)


def mean_rows(a):
    return scale(tsum(a, axis=0), 1.0 / a.shape[0])


def softmax(x, axis=-1):
    if x.data.ndim == 0:
        raise ShapeError("softmax: scalar input has no axis")
    axis = _check_axis(x, axis)
    data = x.data
    if data.ndim == 1:
        y = kernels.softmax_rows(data.reshape(1, -1)).reshape(-1)

        def bw(g):
            return (kernels.softmax_rows_backward(y.reshape(1, -1), g.reshape(1, -1)).reshape(-1),)

        return _result(y, (x,), bw)
    moved = np.ascontiguousarray(np.moveaxis(data, axis, -1))
    flat = moved.reshape(-1, moved.shape[-1])
    yflat = kernels.softmax_rows(flat)
    y = np.moveaxis(yflat.reshape(moved.shape), -1, axis)

    def bw(g):
        gm = np.ascontiguousarray(np.moveaxis(g, axis, -1)).reshape(-1, moved.shape[-1])
        dx = kernels.softmax_rows_backward(yflat, gm)
        return (np.moveaxis(dx.reshape(moved.shape), -1, axis),)

    return _result(y, (x,), bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm: expected 2-D input, got {x.shape}")
    y, xhat, rstd = kernels.layer_norm(
        np.ascontiguousarray(x.data), gamma.data.reshape(-1), beta.data.reshape(-1), eps
    )

    def bw(g):
        dx, dg, db = kernels.layer_norm_backward(
            np.ascontiguousarray(g), xhat, rstd, gamma.data.reshape(-1)
        )
        return dx, dg.reshape(gamma.shape), db.reshape(beta.shape)

    return _result(y, (x, gamma, beta), bw)


# ------------------------------------------------------------------ structure


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: nothing to concatenate")
    axis = _check_axis(tensors[0], axis)
    for t in tensors[1:]:
        if t.data.ndim != tensors[0].data.ndim or any(
            s1 != s2 for k, (s1, s2) in enumerate(zip(t.shape, tensors[0].shape)) if k != axis
        ):
            raise ShapeError(
                f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}"
            )
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis) for k in range(len(tensors))
        )

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def gather_rows(table, ids):
    """Embedding lookup. The index path carries no gradient."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows: ids out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, ids, g)
        return (out,)

    return _result(table.data[ids], (table,), bw)


def slice_rows(x, start, stop):
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return _result(x.data[start:stop], (x,), bw)


def slice_cols(x, start, stop):
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _result(x.data[:, start:stop], (x,), bw)


def scatter_add_cols(x, index, size):
    """Row vector (1, n) scattered into (1, size): ``out[index[k]] += x[k]``."""
    index = np.asarray(index, dtype=np.int64)
    if x.shape != (1, index.size):
        raise ShapeError(f"scatter_add_cols: {x.shape} does not match {index.size} indices")
    if index.size and (index.min() < 0 or index.max() >= size):
        raise ShapeError(f"scatter_add_cols: index out of range for size {size}")
    out = kernels.scatter_add(np.ascontiguousarray(x.data[0]), index, size).reshape(1, size)

    def bw(g):
        return (g[:, index],)

    return _result(out, (x,), bw)


def reshape(x, shape):
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape), (x,), bw)


def pick(x, index):
    """Single element ``x[index]`` as a 0-d tensor."""
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[index] = float(g)
        return (out,)

    return _result(np.asarray(x.data[index]), (x,), bw)


# ------------------------------------------------------------------ backward


def topological_order(root):
    """Operations reachable from ``root``, every node after its inputs."""
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones(loss.shape)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(f, x, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor. Relative error per coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    x = Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64), requires_grad=True)
    out = f(x)
    if out.data.size != 1:
        raise ShapeError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    backward(out)
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size)
    with no_grad():
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            hi = f(x).item()
            flat[k] = orig - step
            lo = f(x).item()
            flat[k] = orig
            numeric[k] = (hi - lo) / (2 * step)
    err = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
