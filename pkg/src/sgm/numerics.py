"""Dense float64 arrays with a small tape-based reverse-mode gradient engine.

Values are plain numpy arrays.  A :class:`Tape` records every operation applied
to a :class:`Node`; :func:`grad` walks the tape backwards once.  Operations
accept nodes or raw arrays (raw arrays are constants) and follow numpy
broadcasting, with ``matmul``/``linsolve``/``transpose``/``trace`` acting on
the last two axes.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NumericsError", "SingularMatrixError", "Tape", "Node", "tensor", "grad",
    "matmul", "linsolve", "transpose", "trace", "add", "sub", "mul", "div",
    "neg", "square", "abs_", "exp", "log", "tanh", "sigmoid", "relu",
    "softmax_rows", "hadamard", "sum_", "mean", "mean_abs", "mse", "concat",
    "safe_reciprocal", "expand_dims", "reshape", "per_node_matmul", "finite_difference", "rel_error", "Adam",
]

MAX_NDIM = 3
COND_LIMIT = 1e8


class NumericsError(ValueError):
    pass


class SingularMatrixError(NumericsError):
    pass


def tensor(values, dtype=np.float64) -> np.ndarray:
    """Validated constructor: float64, at most three axes, all finite."""
    arr = np.array(values, dtype=dtype)
    if arr.ndim > MAX_NDIM:
        raise NumericsError(f"tensor has {arr.ndim} axes, at most {MAX_NDIM} allowed")
    if not np.all(np.isfinite(arr)):
        raise NumericsError("tensor contains NaN or Inf")
    return arr


class Tape:
    """Records nodes in creation order, which is a topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def leaf(self, value) -> "Node":
        return Node(np.array(value, dtype=np.float64), self, (), None)

    def __len__(self):
        return len(self.nodes)


class Node:
    __slots__ = ("value", "tape", "parents", "vjp", "index")
    __array_priority__ = 1000

    def __init__(self, value, tape, parents, vjp):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __neg__(self): return neg(self)

    def __repr__(self):
        return f"Node(#{self.index}, shape={self.value.shape})"


def _val(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _record(value, inputs, vjp):
    """Create a node if any input lives on a tape, else return the raw value."""
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    parents = tuple(x if isinstance(x, Node) else None for x in inputs)
    return Node(value, tape, parents, vjp)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _swap(a):
    return np.swapaxes(a, -1, -2)


# ------------------------------------------------------------------ elementwise

def add(a, b):
    va, vb = _val(a), _val(b)
    return _record(va + vb, (a, b),
                   lambda g: (_unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)))


def sub(a, b):
    va, vb = _val(a), _val(b)
    return _record(va - vb, (a, b),
                   lambda g: (_unbroadcast(g, va.shape), _unbroadcast(-g, vb.shape)))


def mul(a, b):
    va, vb = _val(a), _val(b)
    return _record(va * vb, (a, b),
                   lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)))


hadamard = mul


def div(a, b):
    va, vb = _val(a), _val(b)
    out = va / vb
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / vb, va.shape),
                              _unbroadcast(-g * out / vb, vb.shape)))


def neg(a):
    return _record(-_val(a), (a,), lambda g: (-g,))


def square(a):
    va = _val(a)
    return _record(va * va, (a,), lambda g: (2.0 * va * g,))


def abs_(a):
    va = _val(a)
    return _record(np.abs(va), (a,), lambda g: (np.sign(va) * g,))


def exp(a):
    out = np.exp(_val(a))
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    va = _val(a)
    return _record(np.log(va), (a,), lambda g: (g / va,))


def tanh(a):
    out = np.tanh(_val(a))
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    va = _val(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * va))  # overflow-free logistic
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a):
    va = _val(a)
    mask = va > 0
    return _record(va * mask, (a,), lambda g: (g * mask,))


def safe_reciprocal(a, eps=1e-12):
    """1/a where |a| > eps, else 0 (zero-degree rows propagate nothing)."""
    va = _val(a)
    keep = np.abs(va) > eps
    out = np.where(keep, 1.0 / np.where(keep, va, 1.0), 0.0)
    return _record(out, (a,), lambda g: (-g * out * out,))


# ------------------------------------------------------------------ reductions

def sum_(a, axis=None, keepdims=False):
    va = _val(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, va.shape).copy(),)

    return _record(np.asarray(va.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    va = _val(a)
    count = va.size if axis is None else np.prod([va.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def mean_abs(a, b):
    """Mean absolute difference over all cells."""
    if _val(a).shape != _val(b).shape:
        raise NumericsError(f"shape mismatch {_val(a).shape} vs {_val(b).shape}")
    return mean(abs_(sub(a, b)))


def mse(a, b):
    if _val(a).shape != _val(b).shape:
        raise NumericsError(f"shape mismatch {_val(a).shape} vs {_val(b).shape}")
    return mean(square(sub(a, b)))


def trace(a):
    va = _val(a)
    if va.shape[-1] != va.shape[-2]:
        raise NumericsError("trace of a non-square matrix")
    n = va.shape[-1]
    eye = np.eye(n)
    return _record(np.asarray(np.trace(va, axis1=-2, axis2=-1)), (a,),
                   lambda g: (np.asarray(g)[..., None, None] * eye,))


def softmax_rows(a):
    va = _val(a)
    shifted = va - np.max(va, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)
    return _record(out, (a,),
                   lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


# ------------------------------------------------------------------ linear algebra

def transpose(a):
    return _record(_swap(_val(a)), (a,), lambda g: (_swap(g),))


def matmul(a, b):
    va, vb = _val(a), _val(b)
    if va.ndim < 2 or vb.ndim < 2:
        raise NumericsError("matmul needs at least 2-d operands")
    if va.shape[-1] != vb.shape[-2]:
        raise NumericsError(f"matmul dimension mismatch {va.shape} @ {vb.shape}")
    return _record(va @ vb, (a, b),
                   lambda g: (_unbroadcast(g @ _swap(vb), va.shape),
                              _unbroadcast(_swap(va) @ g, vb.shape)))


def linsolve(m, rhs, cond_limit=COND_LIMIT):
    """Solve ``m @ x = rhs`` (batched over leading axes) without an inverse.

    Raises SingularMatrixError when any condition number exceeds ``cond_limit``.
    The backward pass solves the transposed system for the adjoint.
    """
    vm, vr = _val(m), _val(rhs)
    if vm.ndim < 2 or vm.shape[-1] != vm.shape[-2]:
        raise NumericsError("linsolve needs a square matrix")
    if vr.ndim == 1 and vm.ndim == 2:
        # vector right-hand side: solve as a single column
        col = linsolve(m, expand_dims(rhs, -1), cond_limit)
        return reshape(col, vr.shape)
    if vm.shape[-1] != vr.shape[-2]:
        raise NumericsError(f"linsolve dimension mismatch {vm.shape} vs {vr.shape}")
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(vm)
    if not np.all(np.isfinite(cond)) or np.max(cond) > cond_limit:
        raise SingularMatrixError(f"matrix singular or ill-conditioned (cond={np.max(cond):.3g})")
    x = np.linalg.solve(vm, vr)

    def vjp(g):
        gr = np.linalg.solve(_swap(vm), g)
        gm = -gr @ _swap(x)
        return _unbroadcast(gm, vm.shape), _unbroadcast(gr, vr.shape)

    return _record(x, (m, rhs), vjp)


def reshape(a, shape):
    va = _val(a)
    return _record(va.reshape(shape), (a,), lambda g: (g.reshape(va.shape),))


def per_node_matmul(x, w):
    """``out[..., n, :] = x[..., n, :] @ w[n]`` for per-row weight matrices."""
    vx, vw = _val(x), _val(w)
    out = np.einsum("...nf,nfh->...nh", vx, vw)
    return _record(out, (x, w),
                   lambda g: (np.einsum("...nh,nfh->...nf", g, vw),
                              np.einsum("bnf,bnh->nfh", vx.reshape(-1, *vx.shape[-2:]),
                                        g.reshape(-1, *g.shape[-2:]))))


def expand_dims(a, axis):
    return _record(np.expand_dims(_val(a), axis), (a,), lambda g: (np.squeeze(g, axis=axis),))


def concat(parts: Sequence, axis=-1):
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(vals)))

    return _record(out, tuple(parts), vjp)


# ------------------------------------------------------------------ backward

def grad(loss: Node, leaves: Sequence[Node]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to ``leaves``.

    Leaves that the loss does not depend on get zero gradients, so a constant
    loss yields all zeros.
    """
    if not isinstance(loss, Node):
        return [np.zeros_like(_val(x)) for x in leaves]
    if loss.value.size != 1:
        raise NumericsError(f"loss must be scalar, got shape {loss.value.shape}")
    nodes = loss.tape.nodes
    adj: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    for node in reversed(nodes[: loss.index + 1]):
        g = adj.pop(node.index, None) if node.vjp is not None else adj.get(node.index)
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent is None:
                continue
            prev = adj.get(parent.index)
            adj[parent.index] = pg if prev is None else prev + pg
    return [adj.get(x.index, np.zeros_like(x.value)) if isinstance(x, Node)
            else np.zeros_like(_val(x)) for x in leaves]


# ------------------------------------------------------------------ oracles

def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = f(x)
        flat[k] = orig - step
        fm = f(x)
        flat[k] = orig
        gflat[k] = (fp - fm) / (2.0 * step)
    return out


def rel_error(a, b, floor: float = 1e-8) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|, floor)``."""
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


# ------------------------------------------------------------------ optimizer

class Adam:
    """Adam over a dict of named float arrays, updated in place."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            self.params[k] -= self.lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
