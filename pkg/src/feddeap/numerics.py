"""Dense float64 arithmetic and a small reverse-mode gradient tape.

Values are plain read-only ``numpy`` arrays.  A :class:`Tape` records every
primitive applied to a :class:`Var`; :meth:`Tape.backward` replays the record
in reverse and returns gradients for the registered parameters only.

Every op accepts either ``Var`` or array inputs.  With no ``Var`` among the
inputs the op is evaluated eagerly and returns a plain array, so the same
model code serves training (on a tape) and inference (off the tape).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import (
    DisconnectedParameter,
    IndexOutOfRange,
    NonFiniteValue,
    ShapeMismatch,
    ZeroNorm,
)

NORM_EPS = 1e-12


def as_tensor(x) -> np.ndarray:
    """Return a finite, read-only float64 copy of ``x``."""
    arr = np.array(x, dtype=np.float64, order="C", copy=True)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue("tensor contains NaN or Inf")
    arr.flags.writeable = False
    return arr


class Var:
    """A value recorded on a tape."""

    __slots__ = ("tape", "index", "value", "parents", "grad_fns", "name", "requires_grad")

    def __init__(self, tape, value, parents=(), grad_fns=(), name=None, requires_grad=False):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.grad_fns = grad_fns
        self.name = name
        self.requires_grad = requires_grad
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Var(shape={self.value.shape}{tag})"

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

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a tape value is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Single-owner record of primitive ops, in creation (topological) order."""

    def __init__(self):
        self.nodes: list[Var] = []
        self.params: dict[str, Var] = {}

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise ValueError(f"parameter {name!r} registered twice")
        var = Var(self, as_tensor(value), name=name, requires_grad=True)
        self.params[name] = var
        return var

    def const(self, value) -> Var:
        return Var(self, as_tensor(value))

    def backward(self, loss: Var, *, strict: bool = False) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` for every registered parameter.

        Parameters the loss does not depend on get a zero gradient, or raise
        :class:`DisconnectedParameter` when ``strict`` is set.
        """
        if loss.tape is not self:
            raise ValueError("loss was recorded on a different tape")
        if loss.value.size != 1:
            raise ShapeMismatch(f"loss must be scalar, got shape {loss.value.shape}")
        pending: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        reached: dict[str, np.ndarray] = {}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = pending.pop(node.index, None)
            if g is None:
                continue
            if node.name is not None:
                reached[node.name] = g
            for parent, fn in zip(node.parents, node.grad_fns):
                if not parent.requires_grad:
                    continue
                contrib = fn(g)
                prev = pending.get(parent.index)
                pending[parent.index] = contrib if prev is None else prev + contrib
        grads = {}
        for name, var in self.params.items():
            if name in reached:
                grads[name] = reached[name]
            elif strict:
                raise DisconnectedParameter(f"parameter {name!r} is unreachable from the loss")
            else:
                grads[name] = np.zeros_like(var.value)
        return grads


def backward(tape: Tape, loss: Var, *, strict: bool = False) -> dict[str, np.ndarray]:
    return tape.backward(loss, strict=strict)


# ---------------------------------------------------------------------------
# recording helpers


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise ValueError("inputs come from different tapes")
            tape = x.tape
    return tape


def _record(value, inputs, grad_fns: Sequence[Callable]):
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    parents, fns = [], []
    for x, fn in zip(inputs, grad_fns):
        if isinstance(x, Var) and x.requires_grad:
            parents.append(x)
            fns.append(fn)
    return Var(tape, value, tuple(parents), tuple(fns), requires_grad=bool(parents))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    av, bv = _val(a), _val(b)
    return _record(
        av + bv,
        (a, b),
        (lambda g: _unbroadcast(g, av.shape), lambda g: _unbroadcast(g, bv.shape)),
    )


def sub(a, b):
    av, bv = _val(a), _val(b)
    return _record(
        av - bv,
        (a, b),
        (lambda g: _unbroadcast(g, av.shape), lambda g: -_unbroadcast(g, bv.shape)),
    )


def mul(a, b):
    """Elementwise product with numpy broadcasting."""
    av, bv = _val(a), _val(b)
    return _record(
        av * bv,
        (a, b),
        (lambda g: _unbroadcast(g * bv, av.shape), lambda g: _unbroadcast(g * av, bv.shape)),
    )


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul of {av.shape} and {bv.shape}")
    return _record(av @ bv, (a, b), (lambda g: g @ bv.T, lambda g: av.T @ g))


def transpose(a):
    av = _val(a)
    if av.ndim != 2:
        raise ShapeMismatch(f"transpose expects a matrix, got {av.shape}")
    return _record(av.T, (a,), (lambda g: g.T,))


def tanh(a):
    out = np.tanh(_val(a))
    return _record(out, (a,), (lambda g: g * (1.0 - out * out),))


def sum(a, axis=None):  # noqa: A001 - mirrors numpy
    av = _val(a)

    def grad(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return _record(av.sum(axis=axis), (a,), (grad,))


def mean(a, axis=None):
    av = _val(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def reshape(a, shape):
    av = _val(a)
    return _record(av.reshape(shape), (a,), (lambda g: g.reshape(av.shape),))


def concat(xs, axis=0):
    vals = [_val(x) for x in xs]
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    fns = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        sl = [slice(None)] * vals[0].ndim
        sl[axis] = slice(lo, hi)
        fns.append(lambda g, sl=tuple(sl): g[sl])
    return _record(np.concatenate(vals, axis=axis), tuple(xs), fns)


def take(a, indices):
    """Rows ``a[indices]`` along the leading axis."""
    av = _val(a)
    idx = np.asarray(indices, dtype=np.intp)

    def grad(g):
        out = np.zeros_like(av)
        np.add.at(out, idx, g)
        return out

    return _record(av[idx], (a,), (grad,))


def pick(a, targets):
    """``a[i, targets[i]]`` for every row ``i`` of a 2-D input."""
    av = _val(a)
    rows = np.arange(av.shape[0])
    cols = np.asarray(targets, dtype=np.intp)

    def grad(g):
        out = np.zeros_like(av)
        out[rows, cols] = g
        return out

    return _record(av[rows, cols], (a,), (grad,))


def cosine_matrix(a, b):
    """Cosine similarity between every row of ``a`` and every row of ``b``."""
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise ShapeMismatch(f"cosine of {av.shape} and {bv.shape}")
    na = np.sqrt((av * av).sum(axis=1))
    nb = np.sqrt((bv * bv).sum(axis=1))
    if np.any(na <= NORM_EPS) or np.any(nb <= NORM_EPS):
        raise ZeroNorm("cosine similarity of a (near) zero vector")
    ua = av / na[:, None]
    ub = bv / nb[:, None]
    out = ua @ ub.T

    def grad_a(g):
        v = g @ ub
        return (v - (v * ua).sum(axis=1, keepdims=True) * ua) / na[:, None]

    def grad_b(g):
        v = g.T @ ua
        return (v - (v * ub).sum(axis=1, keepdims=True) * ub) / nb[:, None]

    return _record(out, (a, b), (grad_a, grad_b))


def log_softmax(a):
    """Log-softmax over the last axis."""
    av = _val(a)
    shifted = av - av.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    soft = np.exp(out)
    return _record(out, (a,), (lambda g: g - soft * g.sum(axis=-1, keepdims=True),))


# ---------------------------------------------------------------------------
# composites


def softmax(logits) -> np.ndarray:
    return np.exp(log_softmax(_val(logits)))


def cosine_similarity(a, b):
    """Cosine of two vectors; a scalar (float off-tape, 0-d ``Var`` on tape)."""
    av, bv = _val(a), _val(b)
    if av.ndim != 1 or av.shape != bv.shape:
        raise ShapeMismatch(f"cosine of {av.shape} and {bv.shape}")
    out = reshape(cosine_matrix(reshape(a, (1, -1)), reshape(b, (1, -1))), ())
    return out if isinstance(out, Var) else float(out)


def cross_entropy(logits, targets):
    """Mean of ``-log softmax(logits[i])[targets[i]]`` over rows."""
    lv = _val(logits)
    t = np.asarray(targets, dtype=np.intp)
    if lv.ndim != 2 or t.shape != (lv.shape[0],):
        raise ShapeMismatch(f"logits {lv.shape} vs targets {t.shape}")
    if np.any(t < 0) or np.any(t >= lv.shape[1]):
        raise IndexOutOfRange(f"target outside [0, {lv.shape[1]})")
    return mul(mean(pick(log_softmax(logits), t)), -1.0)


def softmax_cross_entropy(logits, target: int):
    """``-log softmax(logits)[target]`` for a single logit vector."""
    lv = _val(logits)
    if lv.ndim != 1:
        raise ShapeMismatch(f"expected a vector, got {lv.shape}")
    if not 0 <= target < lv.shape[0]:
        raise IndexOutOfRange(f"target {target} outside [0, {lv.shape[0]})")
    out = cross_entropy(reshape(logits, (1, -1)), [target])
    return out if isinstance(out, Var) else float(out)


# ---------------------------------------------------------------------------
# finite differences (independent of the tape)


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x.copy())
        flat[i] = orig - h
        fm = f(x.copy())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
