"""Reverse-mode automatic differentiation over float64 numpy arrays.

Graphs are recorded eagerly: every op returns a new :class:`Tensor` that
remembers its parents and a closure mapping the output adjoint to input
adjoints.  ``backward`` walks the recorded graph once in reverse topological
order and then frees it.
"""

import contextlib
import threading

import numpy as np

from .exceptions import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor", "no_grad", "is_grad_enabled", "backward", "topological_order",
    "grad_check", "matmul", "add", "sub", "mul", "scale", "neg", "embedding",
    "log_softmax", "softmax", "sigmoid", "log_sigmoid", "log", "exp", "max0",
    "sum", "mean", "gather", "concat", "transpose", "reshape", "square",
    "layer_norm", "masked_fill", "affine", "select",
]

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording a graph (thread-local)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad=False, op="leaf"):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self._parents = ()
        self._backward = None

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def _not_scalar(t):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _all_finite(data):
    # a finite sum implies finite entries; only fall back on overflow
    return np.isfinite(np.add.reduce(data, axis=None)) or bool(np.isfinite(data).all())


def _make(data, parents, op, backward_fn):
    if not _all_finite(data):
        raise NumericError(f"non-finite value produced by op {op!r}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    nd = grad.ndim - len(shape)
    if nd > 0:
        grad = grad.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ----------------------------------------------------------------------------
# elementwise

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c):
    """Multiply by a python scalar constant."""
    c = float(c)
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def neg(a):
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


def square(a):
    return _make(a.data * a.data, (a,), "square", lambda g: (2.0 * a.data * g,))


def exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a):
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    return _make(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def sigmoid(a):
    out = _sigmoid(a.data)
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a):
    """log(sigmoid(x)) without underflow for large negative x."""
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), "log_sigmoid", lambda g: (g * _sigmoid(-x),))


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def max0(a):
    # subgradient 0 at exactly 0
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), "max0", lambda g: (g * (out > 0),))


def masked_fill(a, mask, value):
    """Replace entries where ``mask`` is true by a constant; no gradient flows there."""
    mask = np.asarray(mask, dtype=bool)
    keep = ~mask
    return _make(np.where(mask, float(value), a.data), (a,), "masked_fill",
                 lambda g: (_unbroadcast(g * keep, a.shape),))


# ----------------------------------------------------------------------------
# reductions and shape ops

def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    out = np.sum(a.data, axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(np.asarray(out, dtype=np.float64), (a,), "sum", bw)


def mean(a, axis=None):
    n = a.size if axis is None else a.shape[axis]
    out = np.mean(a.data, axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)
    return _make(np.asarray(out, dtype=np.float64), (a,), "mean", bw)


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    # contiguous outputs keep downstream matmuls on the BLAS path
    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), "transpose",
                 lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, "concat", lambda g: tuple(np.split(g, splits, axis=axis)))


def select(a, i):
    """``a[i]`` along the leading axis."""

    def bw(g):
        ga = np.zeros(a.shape)
        ga[i] = g
        return (ga,)
    return _make(np.ascontiguousarray(a.data[i]), (a,), "select", bw)


def gather(a, index):
    """Pick one entry per row along the last axis: ``out[..., ] = a[..., index]``."""
    index = np.asarray(index, dtype=np.intp)
    if index.shape != a.shape[:-1]:
        raise DimensionError(f"gather: index shape {index.shape} vs rows {a.shape[:-1]}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[-1]):
        raise DimensionError("gather: index out of range")
    idx = index[..., None]
    out = np.take_along_axis(a.data, idx, axis=-1)[..., 0]

    def bw(g):
        ga = np.zeros(a.shape)
        np.put_along_axis(ga, idx, g[..., None], axis=-1)
        return (ga,)
    return _make(out, (a,), "gather", bw)


def embedding(weight, ids):
    """Row lookup ``weight[ids]``; repeated ids accumulate adjoints."""
    ids = np.asarray(ids, dtype=np.intp)
    n = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise DimensionError(f"embedding: id out of range [0, {n})")

    def bw(g):
        gw = np.zeros(weight.shape)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)
    return _make(weight.data[ids], (weight,), "embedding", bw)


# ----------------------------------------------------------------------------
# linear algebra and normalisation

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    try:
        if b.ndim == 2 and a.ndim > 2:
            out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + b.shape[-1:])
        else:
            out = a.data @ b.data
    except ValueError as e:
        raise DimensionError(f"matmul: {e}") from None

    def bw(g):
        g = np.ascontiguousarray(g)
        if b.ndim == 2 and a.ndim > 2:
            k, m = b.shape
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
            ga = (g.reshape(-1, m) @ b.data.T).reshape(a.shape)
        else:
            gb = _unbroadcast(np.ascontiguousarray(np.swapaxes(a.data, -1, -2)) @ g, b.shape)
            ga = _unbroadcast(g @ np.ascontiguousarray(np.swapaxes(b.data, -1, -2)), a.shape)
        return ga, gb
    return _make(out, (a, b), "matmul", bw)


def affine(x, w, b):
    """``x @ w + b`` for ``x`` of shape (..., k), ``w`` (k, m), ``b`` (m,)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != w.shape[1:]:
        raise DimensionError(f"affine: {x.shape} @ {w.shape} + {b.shape}")
    k, m = w.shape
    x2 = x.data.reshape(-1, k)
    out = x2 @ w.data
    out += b.data

    def bw(g):
        g2 = np.ascontiguousarray(g).reshape(-1, m)
        return (g2 @ w.data.T).reshape(x.shape), x2.T @ g2, g2.sum(axis=0)
    return _make(out.reshape(x.shape[:-1] + (m,)), (x, w, b), "affine", bw)


def log_softmax(a, axis=-1):
    """Row-wise log-softmax using max subtraction."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return _make(out, (a,), "log_softmax", bw)


def softmax(a, axis=-1):
    z = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _make(out, (a,), "softmax", bw)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalise over the last axis, then apply elementwise gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx_hat = g * gain.data
        d = x.shape[-1]
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / d)
        return (gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape))
    return _make(out, (x, gain, bias), "layer_norm", bw)


# ----------------------------------------------------------------------------
# backward pass

def topological_order(sink):
    """Nodes reachable from ``sink`` that take part in differentiation, inputs first."""
    order, seen = [], set()
    stack = [(sink, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(sink):
    """Fill ``.grad`` of every grad-requiring leaf with d sink / d leaf.

    Leaf accumulators reachable from ``sink`` are reset first.  The graph is
    released afterwards, so a second call on the same sink is an error.
    """
    if sink.size != 1:
        raise ContractError(f"backward needs a scalar sink, got shape {sink.shape}")
    if not sink.requires_grad:
        raise ContractError("sink does not depend on any tensor requiring grad")
    if sink.is_leaf and sink.op != "leaf":
        raise ContractError("graph already released by a previous backward")
    order = topological_order(sink)
    for node in order:
        if node.is_leaf:
            node.grad = np.zeros_like(node.data)
    adj = {id(sink): np.ones_like(sink.data)}
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad += g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + pg
            else:
                adj[key] = pg
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None


def grad_check(f, leaves, eps=1e-5, max_coords=None, seed=0):
    """Compare ``backward`` against central differences.

    ``f`` is called with no arguments and must rebuild the scalar graph from
    the current values of ``leaves``.  Returns the maximum over probed
    coordinates of ``|analytic - numeric| / (1 + |analytic|)``.  With
    ``max_coords`` set, at most that many coordinates per leaf are probed,
    chosen by a seeded generator.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    leaves = list(leaves)
    for t in leaves:
        t.grad = None
    out = f()
    if out.requires_grad:
        backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in leaves]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ga in zip(leaves, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            try:
                with no_grad():
                    flat[c] = orig + eps
                    fp = f().item()
                    flat[c] = orig - eps
                    fm = f().item()
            finally:
                flat[c] = orig
            num = (fp - fm) / (2.0 * eps)
            if not np.isfinite(num):
                raise NumericError("non-finite central difference")
            a = ga.reshape(-1)[c]
            worst = max(worst, abs(a - num) / (1.0 + abs(a)))
    return worst
