"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Every neural computation in this package runs on 64-bit float tensors from
this module.  Operations record a computation graph (op kind, inputs, saved
activations) whenever gradients are enabled and any input requires them;
``backward`` walks that graph once in reverse topological order and
accumulates gradients into the leaves.

The engine also keeps a per-thread FLOP counter so that cost-model tests can
assert arithmetic complexity exactly instead of relying on wall clocks.
"""

from __future__ import annotations

import math
import threading
import warnings
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "no_grad",
    "grad_enabled",
    "reset_flop_counter",
    "flop_count",
    "forward_op",
    "backward",
    "Initializer",
    "add",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "concat",
    "split",
    "narrow",
    "tanh",
    "relu",
    "sigmoid",
    "softmax",
    "layer_norm",
    "embedding_lookup",
    "tsum",
    "tmean",
    "cosine_similarity",
    "cross_entropy",
    "mse",
    "bce_with_logits",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an operation."""


class GraphError(RuntimeError):
    """Raised on invalid use of the autodiff graph (e.g. graphless backward)."""


class _ThreadState(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.flops = 0


_STATE = _ThreadState()


@contextmanager
def no_grad():
    """Disable graph recording inside the block (frozen-model inference)."""
    prev = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


def grad_enabled():
    return _STATE.grad_enabled


def reset_flop_counter():
    _STATE.flops = 0


def flop_count():
    """Floating-point operations recorded on this thread since the last reset."""
    return _STATE.flops


def _count_flops(n):
    _STATE.flops += int(n)


class Tensor:
    """Dense n-dimensional array of float64 with optional gradient tracking.

    ``data`` is row-major; ``grad`` (same shape) is allocated by ``backward``
    for tensors with ``requires_grad``.  Non-leaf tensors keep references to
    their parents and a vector-Jacobian closure until the graph is consumed.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor initialized with non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._vjp = None
        self._op = None

    @classmethod
    def _from_op(cls, data, op, parents, vjp):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        if _STATE.grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# operations


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    _count_flops(out.size)

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._from_op(out, "add", (a, b), vjp)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    _count_flops(out.size)

    def vjp(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return Tensor._from_op(out, "mul", (a, b), vjp)


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    out = a.data * c
    _count_flops(out.size)

    def vjp(g):
        return (g * c,)

    return Tensor._from_op(out, "scale", (a,), vjp)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected 2-d operands, got {a.shape} @ {b.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data
    _count_flops(2 * a.data.shape[0] * a.data.shape[1] * b.data.shape[1])

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(out, "matmul", (a, b), vjp)


def transpose(a):
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d operand, got {a.shape}")
    out = a.data.T.copy()

    def vjp(g):
        return (g.T,)

    return Tensor._from_op(out, "transpose", (a,), vjp)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: need at least one input")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[t.shape for t in tensors]} do not align on axis {axis}"
        ) from None
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return Tensor._from_op(out, "concat", tensors, vjp)


def narrow(a, axis, start, length):
    """Contiguous slice of ``length`` entries along ``axis`` starting at ``start``."""
    a = _as_tensor(a)
    if start < 0 or start + length > a.data.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}, {start + length}) out of bounds for axis {axis} of {a.shape}"
        )
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.data[index].copy()

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return Tensor._from_op(out, "narrow", (a,), vjp)


def split(a, sizes, axis=0):
    """Split along ``axis`` into consecutive chunks of the given sizes."""
    a = _as_tensor(a)
    if sum(sizes) != a.data.shape[axis]:
        raise ShapeError(f"split: sizes {sizes} do not cover axis {axis} of {a.shape}")
    pieces = []
    start = 0
    for length in sizes:
        pieces.append(narrow(a, axis, start, length))
        start += length
    return pieces


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)
    _count_flops(out.size)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return Tensor._from_op(out, "tanh", (a,), vjp)


def relu(a):
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)
    _count_flops(out.size)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return Tensor._from_op(out, "relu", (a,), vjp)


def sigmoid(a):
    a = _as_tensor(a)
    out = _sigmoid(a.data)
    _count_flops(out.size)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, "sigmoid", (a,), vjp)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    ez = np.exp(shifted)
    out = ez / ez.sum(axis=axis, keepdims=True)
    _count_flops(5 * out.size)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return Tensor._from_op(out, "softmax", (a,), vjp)


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then apply affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match width {d}"
        )
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data
    _count_flops(8 * out.size)

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead) if lead else (g * xhat)
        dbias = g.sum(axis=lead) if lead else g
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return Tensor._from_op(out, "layer_norm", (x, gain, bias), vjp)


def embedding_lookup(table, ids):
    """Gather rows of ``table`` (V x d) for an integer id sequence."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise ShapeError(f"embedding_lookup: ids must be 1-d, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding_lookup: id out of range for table with {table.data.shape[0]} rows"
        )
    out = table.data[ids].copy()
    _count_flops(out.size)

    def vjp(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        return (dt,)

    return Tensor._from_op(out, "embedding_lookup", (table,), vjp)


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    _count_flops(a.size)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Tensor._from_op(np.asarray(out), "sum", (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.data.shape[axis]
    _count_flops(a.size)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape) / count,)

    return Tensor._from_op(np.asarray(out), "mean", (a,), vjp)


def cosine_similarity(a, b):
    """Cosine of the angle between two equal-length vectors, as a scalar tensor.

    A zero-norm input makes the cosine undefined; the result is pinned to 0.0
    (with a warning) and no gradient flows.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    va = a.data.reshape(-1)
    vb = b.data.reshape(-1)
    if va.shape != vb.shape:
        raise ShapeError(f"cosine_similarity: lengths differ, {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    _count_flops(6 * va.size)
    if na < 1e-300 or nb < 1e-300:
        warnings.warn("cosine_similarity: zero-norm input, returning 0.0", RuntimeWarning)
        return Tensor(0.0)
    cos = float(va @ vb) / (na * nb)

    def vjp(g):
        gs = float(np.asarray(g).reshape(-1)[0])
        da = gs * (vb / (na * nb) - cos * va / (na * na))
        db = gs * (va / (na * nb) - cos * vb / (nb * nb))
        return da.reshape(a.data.shape), db.reshape(b.data.shape)

    return Tensor._from_op(np.asarray(cos), "cosine_similarity", (a, b), vjp)


def cross_entropy(logits, target):
    """Softmax cross-entropy of a single logit row against an integer class."""
    logits = _as_tensor(logits)
    row = logits.data.reshape(-1)
    target = int(target)
    if not 0 <= target < row.size:
        raise IndexError(f"cross_entropy: target {target} out of range for {row.size} classes")
    m = row.max()
    lse = m + math.log(np.exp(row - m).sum())
    loss = lse - row[target]
    _count_flops(5 * row.size)

    def vjp(g):
        gs = float(np.asarray(g).reshape(-1)[0])
        p = np.exp(row - lse)
        p[target] -= 1.0
        return (gs * p.reshape(logits.data.shape),)

    return Tensor._from_op(np.asarray(loss), "cross_entropy", (logits,), vjp)


def mse(pred, target):
    """Mean squared error over all elements."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"mse: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = np.asarray((diff * diff).mean())
    n = diff.size
    _count_flops(3 * n)

    def vjp(g):
        gs = float(np.asarray(g).reshape(-1)[0])
        d = (2.0 / n) * diff * gs
        return d, -d

    return Tensor._from_op(out, "mse", (pred, target), vjp)


def bce_with_logits(logit, label):
    """Numerically stable binary cross-entropy on a scalar logit."""
    logit = _as_tensor(logit)
    z = float(logit.data.reshape(-1)[0])
    if logit.size != 1:
        raise ShapeError(f"bce_with_logits: expected scalar logit, got shape {logit.shape}")
    y = float(label)
    loss = max(z, 0.0) - z * y + math.log1p(math.exp(-abs(z)))
    _count_flops(5)

    def vjp(g):
        gs = float(np.asarray(g).reshape(-1)[0])
        p = 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))
        return (np.full_like(logit.data, gs * (p - y)),)

    return Tensor._from_op(np.asarray(loss), "bce_with_logits", (logit,), vjp)


_OP_TABLE = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "concat": concat,
    "split": split,
    "tanh": tanh,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "embedding_lookup": embedding_lookup,
    "mean": tmean,
    "sum": tsum,
    "scale": scale,
    "transpose": transpose,
    "cosine_similarity": cosine_similarity,
    "cross_entropy": cross_entropy,
    "mse": mse,
    "bce_with_logits": bce_with_logits,
}


def forward_op(kind, *inputs, **kwargs):
    """Dispatch an operation by kind name (see ``_OP_TABLE`` for the set)."""
    try:
        fn = _OP_TABLE[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss):
    """Propagate d(loss)/d(leaf) into every requires_grad leaf of the graph.

    The loss must be a recorded scalar.  Interior graph links are cleared
    afterwards, so a graph is consumed by exactly one backward pass.
    Gradients accumulate across calls until ``zero_grad``.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("backward on a non-finite loss")
    if not loss._parents:
        raise GraphError("backward on a tensor with no recorded graph")

    topo = []
    visiting = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visiting:
            continue
        visiting.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent._parents or parent.requires_grad:
                stack.append((parent, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not (parent.requires_grad or parent._parents):
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        elif node.requires_grad:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
    # consume the graph: later backward calls on it must fail loudly
    for node in topo:
        node._parents = ()
        node._vjp = None


def zero_grads(params):
    """Clear gradients on an iterable (or name->Tensor mapping) of parameters."""
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None


# ---------------------------------------------------------------------------
# parameter initialization


class Initializer:
    """Single seeded PRNG from which every model parameter is drawn.

    Weight matrices use uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out));
    vectors (biases, layer-norm affine) use constants.  Same seed and same
    construction order give bit-identical parameters.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)

    def matrix(self, fan_in, fan_out, shape=None):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        size = shape if shape is not None else (fan_in, fan_out)
        return Tensor(self.rng.uniform(-bound, bound, size=size), requires_grad=True)

    def zeros(self, shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(self, shape):
        return Tensor(np.ones(shape), requires_grad=True)
