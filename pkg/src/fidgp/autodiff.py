"""Small reverse-mode automatic differentiation engine over numpy arrays.

Operations executed while a :class:`Tape` is active are recorded eagerly;
``tape.backward(loss)`` then walks the records in reverse order.  Without an
active tape every operation is a plain numpy computation, so the same model
code serves both training and evaluation.

    with Tape() as tape:
        loss = ad.sum(ad.square(x))
    (gx,) = tape.gradient(loss, [x])
"""

from __future__ import annotations

import builtins
import threading
from dataclasses import dataclass, field

import numpy as np

from .errors import NotScalar, ShapeMismatch, TapeConsumed

_local = threading.local()


def _stack():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def current_tape():
    s = _stack()
    return s[-1] if s else None


class Tensor:
    """A float64 array that can participate in differentiation."""

    # make numpy defer mixed ndarray/Tensor arithmetic to the Tensor methods
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id = None
        self._tape = None

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    size = property(lambda self: self.data.size)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __float__(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


@dataclass
class _Node:
    parents: tuple
    backward: object


@dataclass
class Tape:
    """Ordered record of differentiable operations."""

    nodes: list = field(default_factory=list)
    consumed: bool = False
    _leaves: dict = field(default_factory=dict)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    def _leaf_id(self, t: Tensor):
        key = id(t)
        if key not in self._leaves:
            self.nodes.append(_Node((), None))
            self._leaves[key] = (len(self.nodes) - 1, t)
        return self._leaves[key][0]

    def _id_of(self, t: Tensor):
        if t._tape is self and t.node_id is not None:
            return t.node_id
        if t.requires_grad:
            return self._leaf_id(t)
        return None

    def id_of(self, t: Tensor):
        """Node id of ``t`` on this tape, or None when it was never recorded."""
        if t._tape is self:
            return t.node_id
        entry = self._leaves.get(id(t))
        return entry[0] if entry else None

    def backward(self, loss: Tensor):
        """Gradients of a scalar ``loss`` keyed by node id."""
        if self.consumed:
            raise TapeConsumed("backward was already run on this tape")
        if loss.size != 1:
            raise NotScalar(f"loss must be scalar, got shape {loss.shape}")
        self.consumed = True
        grads = {}
        root = self.id_of(loss)
        if root is None:
            return grads
        grads[root] = np.ones_like(loss.data)
        for nid in range(root, -1, -1):
            g = grads.get(nid)
            node = self.nodes[nid]
            if g is None or node.backward is None:
                continue
            for pid, pg in zip(node.parents, node.backward(g)):
                if pid is None or pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        return grads

    def gradient(self, loss: Tensor, sources):
        """Gradients of ``loss`` with respect to each tensor in ``sources``.

        Sources that do not influence the loss receive zeros.
        """
        grads = self.backward(loss)
        out = []
        for s in sources:
            nid = self.id_of(s)
            g = grads.get(nid) if nid is not None else None
            out.append(np.zeros_like(s.data) if g is None else np.asarray(g).reshape(s.shape))
        return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents, backward):
    out = Tensor(data)
    tape = current_tape()
    if tape is None:
        return out
    ids = tuple(tape._id_of(p) for p in parents)
    if all(i is None for i in ids):
        return out
    tape.nodes.append(_Node(ids, backward))
    out.node_id = len(tape.nodes) - 1
    out._tape = tape
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- binary ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    ad_, bd = a.data, b.data
    return _record(
        ad_ * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad_.shape), _unbroadcast(g * ad_, bd.shape)),
    )


elementwise_mul = mul


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    ad_, bd = a.data, b.data
    out = ad_ / bd
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad_.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul shapes {a.shape} and {b.shape} do not align")
    ad_, bd = a.data, b.data

    def back(g):
        if ad_.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad_.T @ g
        if ad_.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad_, g)
        if ad_.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad_.T @ g
        return g * bd, g * ad_  # vector dot product

    return _record(ad_ @ bd, (a, b), back)


def maximum_const(a, c: float):
    a = as_tensor(a)
    mask = a.data >= c
    return _record(np.maximum(a.data, c), (a,), lambda g: (g * mask,))


def minimum_const(a, c: float):
    a = as_tensor(a)
    mask = a.data <= c
    return _record(np.minimum(a.data, c), (a,), lambda g: (g * mask,))


# ----------------------------------------------------------------- unary ops


def neg(a):
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    return _record(y, (a,), lambda g: (g * y,))


def log(a):
    a = as_tensor(a)
    x = a.data
    return _record(np.log(x), (a,), lambda g: (g / x,))


def sigmoid(a):
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def softplus(a):
    a = as_tensor(a)
    x = a.data
    y = np.logaddexp(0.0, x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _record(y, (a,), lambda g: (g * s,))


def square(a):
    a = as_tensor(a)
    x = a.data
    return _record(x * x, (a,), lambda g: (2.0 * g * x,))


def sqrt(a):
    a = as_tensor(a)
    y = np.sqrt(a.data)
    return _record(y, (a,), lambda g: (0.5 * g / y,))


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    y = x - lse
    p = np.exp(y)
    return _record(y, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# ------------------------------------------------------------ reductions etc.


def sum(a, axis=None):
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(a.data.sum(axis=axis), (a,), back)


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return sum(a, axis) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {old} into {shape}") from None
    return _record(out, (a,), lambda g: (g.reshape(old),))


def transpose(a):
    a = as_tensor(a)
    return _record(a.data.T, (a,), lambda g: (g.T,))


def broadcast(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {old} to {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (_unbroadcast(g, old),))


def getitem(a, idx):
    a = as_tensor(a)
    shape = a.shape

    basic = _is_basic_index(idx)

    def back(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), back)


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, builtins.slice, type(Ellipsis), type(None))) for i in items)


slice = getitem


def bilinear(u, a, v):
    """Scalar ``u^T A v`` for constant vectors ``u``, ``v``."""
    a = as_tensor(a)
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    if a.ndim != 2 or a.shape != (u.shape[0], v.shape[0]):
        raise ShapeMismatch(f"bilinear form with vectors {u.shape}, {v.shape} and matrix {a.shape}")
    return _record(np.asarray(u @ a.data @ v), (a,), lambda g: (g * np.outer(u, v),))


def concat(tensors, axis=-1):
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeMismatch(
            "cannot concatenate shapes " + ", ".join(str(t.shape) for t in ts)
        ) from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record(out, tuple(ts), lambda g: tuple(np.split(g, splits, axis=axis)))


# ---------------------------------------------------------------- optimizers


@dataclass
class AdamState:
    step: int
    m: list
    v: list

    @classmethod
    def zeros(cls, params):
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update.  Pure: returns ``(new_params, new_state)``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ShapeMismatch("params, grads and optimizer state differ in length")
    b1, b2 = betas
    t = state.step + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if not (np.shape(p) == np.shape(g) == np.shape(m) == np.shape(v)):
            raise ShapeMismatch(f"param shape {np.shape(p)} vs grad shape {np.shape(g)}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        new_p.append(p - lr * mhat / (np.sqrt(vhat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(t, new_m, new_v)


@dataclass
class MomentumState:
    velocity: list

    @classmethod
    def zeros(cls, params):
        return cls([np.zeros_like(p) for p in params])


def sgd_momentum_step(params, grads, state: MomentumState, lr=1e-3, momentum=0.9):
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, state.velocity):
        if np.shape(p) != np.shape(g):
            raise ShapeMismatch(f"param shape {np.shape(p)} vs grad shape {np.shape(g)}")
        v = momentum * v + g
        new_p.append(p - lr * v)
        new_v.append(v)
    return new_p, MomentumState(new_v)


class Optimizer:
    """Applies Adam or SGD+momentum updates to a fixed list of Tensors."""

    def __init__(self, params, kind="adam", lr=1e-3, betas=(0.9, 0.999), eps=1e-8, momentum=0.9):
        self.params = list(params)
        self.kind = kind
        self.lr, self.betas, self.eps, self.momentum = lr, betas, eps, momentum
        arrays = [p.data for p in self.params]
        if kind == "adam":
            self.state = AdamState.zeros(arrays)
        elif kind == "sgd":
            self.state = MomentumState.zeros(arrays)
        else:
            raise ValueError(f"unknown optimizer {kind!r}")

    def step(self, grads):
        arrays = [p.data for p in self.params]
        if self.kind == "adam":
            new, self.state = adam_step(arrays, grads, self.state, self.lr, self.betas, self.eps)
        else:
            new, self.state = sgd_momentum_step(arrays, grads, self.state, self.lr, self.momentum)
        for p, a in zip(self.params, new):
            p.data = a
