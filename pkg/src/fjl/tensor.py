"""Small dense tensor type with define-by-run reverse-mode autodiff.

Every op returns a new :class:`Tensor`. When any input requires a gradient
the output carries a node (parents + a backward closure); node ids come from
a global counter so creation order is a valid topological order.
"""

from __future__ import annotations

import itertools

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "GraphError",
    "tensor",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "matmul",
    "concat",
    "slice_axis",
    "reshape",
    "transpose",
    "mean",
    "sum",
    "square",
    "sqrt",
    "exp",
    "sigmoid",
    "tanh",
    "relu",
    "softmax",
    "layer_norm",
    "backward",
    "finite_diff_check",
]

_ids = itertools.count(1)


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_id", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._id = next(_ids)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

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
    def id(self):
        return self._id

    @property
    def op(self):
        return self._op

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def constant(data):
    if isinstance(data, Tensor):
        return data
    return Tensor(data)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name}: non-finite value in output")


def _make(name, data, parents, backward_fn):
    _check_finite(name, data)
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = name
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("div", out, (a, b), bw)


def neg(a):
    a = _as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, factor):
    """Multiply by a python scalar (no gradient w.r.t. the factor)."""
    a = _as_tensor(a)
    factor = float(factor)
    return _make("scale", a.data * factor, (a,), lambda g: (g * factor,))


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    """Matrix product; leading axes of ``a`` are treated as a batch.

    ``b`` is either 2-d (shared across the batch) or has the same batch
    shape as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim < 1 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch shapes differ, {a.shape} @ {b.shape}")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def transpose(a, axes=None):
    """Permute axes; default swaps the last two."""
    a = _as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError(f"transpose: need at least 2 axes, got shape {a.shape}")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} do not permute shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape):
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0]
    ax = axis % ref.ndim if ref.ndim else 0
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            i != ax and m != n for i, (m, n) in enumerate(zip(ref.shape, t.shape))
        ):
            raise ShapeError(f"concat: shapes {ref.shape} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make("concat", out, tensors, bw)


def slice_axis(a, axis, start, stop):
    """``a[..., start:stop, ...]`` along ``axis``."""
    a = _as_tensor(a)
    ax = axis % a.ndim
    n = a.shape[ax]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice: range [{start}, {stop}) out of bounds for axis {axis} of {a.shape}")
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def bw(g):
        full = np.zeros(a.shape)
        full[index] = g
        return (full,)

    return _make("slice", a.data[index], (a,), bw)


# -- reductions --------------------------------------------------------------


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make("mean", out, (a,), bw)


# -- elementwise unary -------------------------------------------------------


def square(a):
    a = _as_tensor(a)
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a):
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise NumericError("sqrt: negative input")
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def exp(a):
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def _sigmoid(x):
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = _as_tensor(a)
    out = _sigmoid(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def softmax(a):
    """Softmax over the last axis (max-subtracted)."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax", out, (a,), bw)


def layer_norm(a, eps=1e-5):
    """Normalize over the last axis to zero mean / unit variance (no affine)."""
    a = _as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gx),)

    return _make("layer_norm", out, (a,), bw)


# -- backward ----------------------------------------------------------------


def _collect(root):
    seen = {root._id: root}
    stack = [root]
    while stack:
        node = stack.pop()
        for p in node._parents:
            if p._id not in seen:
                seen[p._id] = p
                stack.append(p)
    return [seen[k] for k in sorted(seen)]


def backward(root):
    """Reverse-mode sweep from a scalar ``root``.

    Returns ``{node id: gradient array}`` for every node reachable from the
    root and also stores the gradient on each leaf that requires one.
    """
    if root.size != 1:
        raise GraphError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise GraphError("backward: root is detached (no input requires grad)")
    order = _collect(root)
    grads = {root._id: np.ones(root.shape)}
    for node in reversed(order):
        g = grads.get(node._id)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg
    for node in order:
        if node.is_leaf and node.requires_grad:
            node.grad = grads.get(node._id, np.zeros(node.shape))
    return grads


def finite_diff_check(f, point, step=1e-6):
    """Max relative error between autodiff and central differences.

    ``f`` maps a Tensor to a scalar Tensor. The error for each coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    out = f(x)
    if out.size != 1:
        raise GraphError(f"finite_diff_check: f must return a scalar, got shape {out.shape}")
    if out.requires_grad:
        backward(out)
        analytic = x.grad
    else:
        analytic = np.zeros(base.shape)
    numeric = np.zeros(base.size)
    flat = base.reshape(-1)
    for i in range(flat.size):
        plus = flat.copy()
        plus[i] += step
        minus = flat.copy()
        minus[i] -= step
        fp = f(Tensor(plus.reshape(base.shape))).item()
        fm = f(Tensor(minus.reshape(base.shape))).item()
        numeric[i] = (fp - fm) / (2.0 * step)
    err = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
