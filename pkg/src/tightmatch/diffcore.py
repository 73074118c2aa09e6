"""Dense rank-<=2 tensors with reverse-mode gradient accumulation.

Everything is 64-bit. Scalars are represented as (1, 1) tensors so the
whole engine only ever deals with 1-D/2-D numpy arrays. Backward walks
the graph in reverse topological order using pass-local adjoints, so
repeated backward calls accumulate into leaf ``.grad`` buffers exactly
once per call.
"""

from __future__ import annotations

import numpy as np

LOG_EPS = 1e-12


class DiffError(Exception):
    pass


class ShapeError(DiffError):
    pass


class RankError(DiffError):
    pass


class EmptyReductionError(DiffError):
    pass


class NumericDomainError(DiffError):
    pass


class Tensor:
    """A dense float64 array plus an optional differentiation record."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        if arr.ndim > 2:
            raise RankError(f"rank-{arr.ndim} tensors are not supported")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if (requires_grad and not _parents) else None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self._parents

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def item(self):
        if self.data.size != 1:
            raise RankError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def backward(self):
        backward(self)

    # operator sugar; constants are lifted to plain tensors
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    """Reduce an upstream gradient back to the shape of a broadcast operand."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _broadcastable(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from None


def _node(data, parents, backward_rule):
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs,
                  _parents=parents if needs else (),
                  _backward=backward_rule if needs else None)


# ---------------------------------------------------------------------------
# elementwise operations


def add(a, b):
    _broadcastable(a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    _broadcastable(a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    _broadcastable(a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    _broadcastable(a, b)
    return _node(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data ** 2), b.shape)))


def relu(a):
    mask = a.data > 0.0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a):
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def log(a):
    """Natural log with the inputs clamped to >= LOG_EPS first.

    Strictly negative inputs are a domain error; the clamp only guards
    probabilities and discriminator outputs that underflow to 0.
    """
    if np.any(a.data < 0.0):
        raise NumericDomainError("log of negative value (after clamp)")
    clamped = np.maximum(a.data, LOG_EPS)
    return _node(np.log(clamped), (a,),
                 lambda g: (g * (a.data > LOG_EPS) / clamped,))


def square(a):
    return _node(a.data ** 2, (a,), lambda g: (2.0 * g * a.data,))


def exp(a):
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def clamp(a, lo, hi):
    """Clamp values to [lo, hi]; gradient is 1 strictly inside, 0 outside."""
    inside = (a.data > lo) & (a.data < hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a):
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,))


def concat_cols(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols row mismatch: {a.shape} vs {b.shape}")
    na = a.shape[1]
    return _node(np.concatenate([a.data, b.data], axis=1), (a, b),
                 lambda g: (g[:, :na], g[:, na:]))


def gather_rows(a, idx):
    """Select rows by integer index; backward scatter-adds into the source."""
    idx = np.asarray(idx, dtype=np.intp)

    def back(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.data[idx], (a,), back)


def grad_reverse(a, coeff):
    """Identity forward; backward multiplies upstream gradients by -coeff."""
    if coeff < 0:
        raise ValueError("gradient reversal coefficient must be >= 0")
    return _node(a.data.copy(), (a,), lambda g: (-coeff * g,))


# ---------------------------------------------------------------------------
# reductions


def mean(a):
    if a.data.size == 0:
        raise EmptyReductionError("mean of empty tensor")
    n = a.data.size
    return _node(np.array([[a.data.mean()]]), (a,),
                 lambda g: (np.full_like(a.data, g.reshape(-1)[0] / n),))


def sum_all(a):
    if a.data.size == 0:
        raise EmptyReductionError("sum of empty tensor")
    return _node(np.array([[a.data.sum()]]), (a,),
                 lambda g: (np.full_like(a.data, g.reshape(-1)[0]),))


def sum_rows(a):
    """Sum each row to a column vector: (n, d) -> (n, 1)."""
    if a.data.ndim != 2 or a.data.size == 0:
        raise EmptyReductionError(f"sum_rows needs a non-empty matrix, got {a.shape}")
    return _node(a.data.sum(axis=1, keepdims=True), (a,),
                 lambda g: (np.repeat(g, a.shape[1], axis=1),))


def softmax_rows(a):
    if a.data.ndim != 2:
        raise ShapeError(f"softmax_rows needs a matrix, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _node(p, (a,), back)


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def backward(loss):
    """Accumulate dLoss/dLeaf into every requires_grad leaf reachable from loss."""
    if loss.data.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if not np.all(np.isfinite(loss.data)):
        raise NumericDomainError("backward called on non-finite loss")

    order = []
    seen = set()
    stack = [(loss, False)]
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

    adjoint = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in adjoint:
                adjoint[key] += pg
            else:
                adjoint[key] = np.array(pg, dtype=np.float64, copy=True)


def grad_check(f, point, h=1e-6):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor; ``point`` gives the evaluation
    coordinates. Relative error uses max(1, |analytic|) in the denominator.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = Tensor(np.array(point, dtype=np.float64, copy=True), requires_grad=True)
    loss = f(x)
    backward(loss)
    analytic = x.grad.copy()

    flat = x.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x).item()
        flat[i] = orig - h
        lo = f(x).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * h)
    if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
        raise NumericDomainError("non-finite value during gradient check")

    err = np.abs(analytic.reshape(-1) - numeric)
    scale = np.maximum(1.0, np.abs(analytic.reshape(-1)))
    return float((err / scale).max()) if flat.size else 0.0
