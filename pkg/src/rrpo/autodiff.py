"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

The graph is built on the fly (define-by-run): every primitive returns a new
:class:`Tensor` that remembers its parents and a local gradient rule.
:func:`backward` walks the graph once in reverse topological order.

    >>> x = Tensor(3.0, requires_grad=True)
    >>> grads = backward(x * x)
    >>> float(x.grad)
    6.0
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NumericError, ShapeError, UsageError

DTYPE = np.float64


class Tensor:
    """A dense float64 array node in the compute graph.

    Leaves created with ``requires_grad=True`` carry a zero-initialised
    ``grad`` accumulator of the same shape; it is overwritten (zeroed, then
    accumulated) by every call to :func:`backward` that reaches the leaf.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_rule", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents = ()
        self._rule = None
        self.op = "leaf"

    @classmethod
    def _node(cls, data, parents, rule, op):
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = parents if out.requires_grad else ()
        out._rule = rule if out.requires_grad else None
        out.op = op
        return out

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
    def is_leaf(self):
        return not self._parents

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        """Same values, cut from the graph (a stop-gradient)."""
        return Tensor._node(self.data, (), None, "detach")

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=DTYPE))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # method forms
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def softmax(self, axis=-1):
        return softmax(self, axis)

    def log_softmax(self, axis=-1):
        return log_softmax(self, axis)

    def sigmoid(self):
        return sigmoid(self)

    def log_sigmoid(self):
        return log_sigmoid(self)

    def relu(self):
        return relu(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op, *arrays):
    for a in arrays:
        # a finite sum implies finite entries; only overflow needs the full scan
        if not math.isfinite(np.add.reduce(a, axis=None)) and not np.isfinite(a).all():
            raise NumericError(f"{op}: non-finite input")


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    if a.shape == b.shape:
        return a.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    _check_finite("add", a.data, b.data)
    sa, sb = a.shape, b.shape

    def rule(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._node(a.data + b.data, (a, b), rule, "add")


def neg(a):
    a = as_tensor(a)
    return Tensor._node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    _check_finite("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def rule(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._node(ad * bd, (a, b), rule, "mul")


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    _check_finite("power", a.data)
    if p < 0 and np.any(a.data == 0):
        raise NumericError("power: zero base with negative exponent")
    ad = a.data
    return Tensor._node(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "power")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul: scalar operands are not allowed")
    ka = a.shape[-1]
    kb = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if ka != kb:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    _check_finite("matmul", a.data, b.data)
    ad, bd = a.data, b.data
    try:
        out = ad @ bd
    except ValueError as exc:
        raise ShapeError(f"matmul: {exc}") from None

    def rule(g):
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if ad.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + (ga.shape[-1],))
        if bd.ndim == 1:
            gb = gb.reshape(gb.shape[:-2] + (gb.shape[-2],))
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._node(out, (a, b), rule, "matmul")


def exp(a):
    a = as_tensor(a)
    _check_finite("exp", a.data)
    out = np.exp(a.data)
    if not np.isfinite(out).all():
        raise NumericError("exp: overflow")
    return Tensor._node(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    _check_finite("log", a.data)
    if np.any(a.data <= 0):
        raise NumericError("log: non-positive input")
    ad = a.data
    return Tensor._node(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._node(np.asarray(out, dtype=DTYPE), (a,), rule, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def gather(a, index):
    """Select ``a[..., index[..., k]]`` along the last axis."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if index.shape[:-1] != a.shape[:-1]:
        raise ShapeError(f"gather: index {index.shape} does not match {a.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[-1]):
        raise ShapeError("gather: index out of range")
    out = np.take_along_axis(a.data, index, axis=-1)
    shape = a.shape

    def rule(g):
        v = shape[-1]
        ga = np.zeros((int(np.prod(shape[:-1], dtype=int)), v))
        idx2 = index.reshape(-1, index.shape[-1])
        rows = np.arange(idx2.shape[0])[:, None]
        np.add.at(ga, (rows, idx2), g.reshape(idx2.shape))
        return (ga.reshape(shape),)

    return Tensor._node(out, (a,), rule, "gather")


def softmax(a, axis=-1):
    a = as_tensor(a)
    _check_finite("softmax", a.data)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._node(s, (a,), rule, "softmax")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    _check_finite("log_softmax", a.data)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def rule(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._node(out, (a,), rule, "log_softmax")


def _sigmoid(x):
    # two-branch form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a):
    a = as_tensor(a)
    _check_finite("sigmoid", a.data)
    s = _sigmoid(np.atleast_1d(a.data)).reshape(a.shape)
    return Tensor._node(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def log_sigmoid(a):
    a = as_tensor(a)
    _check_finite("log_sigmoid", a.data)
    ad = a.data
    out = -np.logaddexp(0.0, -ad)
    s_neg = _sigmoid(np.atleast_1d(-ad)).reshape(ad.shape)
    return Tensor._node(np.asarray(out, dtype=DTYPE), (a,), lambda g: (g * s_neg,), "log_sigmoid")


# ---------------------------------------------------------- structural ops


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return Tensor._node(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a, key):
    a = as_tensor(a)
    shape = a.shape
    try:
        out = a.data[key]
    except IndexError as exc:
        raise ShapeError(f"getitem: {exc}") from None

    parts = key if isinstance(key, tuple) else (key,)
    fancy = any(isinstance(k, (list, np.ndarray)) for k in parts)

    def rule(g):
        ga = np.zeros(shape)
        if fancy:
            np.add.at(ga, key, g)
        else:
            ga[key] = g
        return (ga,)

    return Tensor._node(np.array(out, dtype=DTYPE), (a,), rule, "getitem")


def relu(a):
    a = as_tensor(a)
    _check_finite("relu", a.data)
    on = a.data > 0
    return Tensor._node(a.data * on, (a,), lambda g: (g * on,), "relu")


def tanh(a):
    a = as_tensor(a)
    _check_finite("tanh", a.data)
    t = np.tanh(a.data)
    return Tensor._node(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def stack(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]
    if len({t.shape for t in ts}) > 1:
        raise ShapeError("stack: all inputs must share a shape")
    out = np.stack([t.data for t in ts], axis=axis)
    n = len(ts)

    def rule(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return Tensor._node(out, tuple(ts), rule, "stack")


# ------------------------------------------------------------------ backward


def _topo_order(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss):
    """Back-propagate from a scalar ``loss``.

    Every ``requires_grad`` leaf reachable from ``loss`` has its ``grad``
    zeroed and then set to d(loss)/d(leaf). Returns ``{leaf: grad}``.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise UsageError("backward() needs a scalar Tensor loss")
    order = _topo_order(loss)
    leaves = [n for n in order if n.is_leaf and n.requires_grad]
    for leaf in leaves:
        leaf.grad = np.zeros_like(leaf.data)
    if not loss.requires_grad:
        return {leaf: leaf.grad for leaf in leaves}

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.asarray(pg, dtype=DTYPE)
    return {leaf: leaf.grad for leaf in leaves}
