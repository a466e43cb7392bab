"""Reverse-mode differentiation over 2-D dense arrays.

Only the handful of operators the embedding and quantisation networks need are
provided.  Operations executed inside ``with Tape() as tape:`` are recorded
when any input requires a gradient; ``backward(tape, loss)`` walks the record
in reverse and accumulates into each leaf's ``.grad``.

    >>> w = Tensor([[2.0], [3.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(dense(Tensor([[1.0, 1.0]]), w, Tensor([[1.0]])))
    >>> backward(tape, loss)[w].ravel().tolist()
    [1.0, 1.0]
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
L2_EPS = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_active: list["Tape"] = []


class ShapeError(ValueError):
    pass


class Tensor:
    """A 2-D array with an optional gradient buffer."""

    __slots__ = ("_value", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, value, requires_grad=False, name=None, dtype=None):
        v = np.array(value, dtype=dtype or _infer_dtype(value), copy=True)
        if v.ndim == 1:
            v = v.reshape(1, -1)
        elif v.ndim == 0:
            v = v.reshape(1, 1)
        if v.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {v.shape}")
        _check_finite(v, name or "tensor")
        self._value = v
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, v, requires_grad, name):
        t = cls.__new__(cls)
        t._value = v
        t.grad = None
        t.requires_grad = requires_grad
        t.name = name
        return t

    @property
    def value(self) -> np.ndarray:
        return self._value

    @property
    def shape(self) -> tuple[int, int]:
        return self._value.shape

    @property
    def dtype(self):
        return self._value.dtype

    def assign(self, v):
        """Replace the values in place (parameter updates); shape is fixed."""
        v = np.asarray(v, dtype=self._value.dtype)
        if v.shape != self._value.shape:
            raise ShapeError(f"cannot assign {v.shape} into {self._value.shape}")
        _check_finite(v, self.name or "tensor")
        self._value = v.copy()

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self._value.reshape(-1)[0])

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"


def _infer_dtype(value):
    if isinstance(value, np.ndarray) and value.dtype == np.float64:
        return np.float64
    if isinstance(value, Tensor):
        return value.dtype
    return DEFAULT_DTYPE


def _check_finite(v, what):
    if not np.all(np.isfinite(v)):
        raise FloatingPointError(f"non-finite values in {what}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of operations (forward execution order)."""

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.pop()
        return False

    def __len__(self):
        return len(self.nodes)


def _emit(value, inputs, vjp, name=None) -> Tensor:
    _check_finite(value, name or "op output")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(value, needs, name)
    if needs and _active:
        _active[-1].nodes.append(_Node(out, tuple(inputs), vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad``; returns leaf -> gradient."""
    if loss.shape != (1, 1):
        raise ShapeError(f"loss must be 1x1, got {loss.shape}")
    if not any(n.out is loss for n in tape.nodes):
        raise ValueError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1), dtype=loss.dtype)}
    produced = {id(n.out) for n in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = inp
    out = {}
    for key, leaf in leaves.items():
        g = grads[key].astype(leaf.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        out[leaf] = leaf.grad
    return out


# -- operators ------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T if a.requires_grad else None,
                                             av.T @ g if b.requires_grad else None))


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x @ w + b`` with ``b`` a single row."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.shape[1] != w.shape[0] or b.shape != (1, w.shape[1]):
        raise ShapeError(f"dense shapes incompatible: x{x.shape} w{w.shape} b{b.shape}")
    xv, wv = x.value, w.value

    def vjp(g):
        return (g @ wv.T if x.requires_grad else None,
                xv.T @ g if w.requires_grad else None,
                g.sum(axis=0, keepdims=True, dtype=np.float64))

    return _emit(xv @ wv + b.value, (x, w, b), vjp)


def embedding_dense(ids: np.ndarray, w: Tensor, b: Tensor) -> Tensor:
    """``dense`` applied to one-hot rows, realised as a row lookup into ``w``."""
    ids = np.asarray(ids, dtype=np.int64)
    wv = w.value

    def vjp(g):
        gw = np.zeros_like(wv)
        np.add.at(gw, ids, g)
        return gw, g.sum(axis=0, keepdims=True, dtype=np.float64)

    return _emit(wv[ids] + b.value, (w, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _emit(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _emit(a.value - b.value, (a, b), lambda g: (g, -g))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "elementwise_mul")
    av, bv = a.value, b.value
    return _emit(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(x: Tensor, c: float) -> Tensor:
    return _emit(x.value * x.dtype.type(c), (x,), lambda g: (g * c,))


def add_const(x: Tensor, c) -> Tensor:
    """``x + c`` where ``c`` is a scalar or an array of x's shape (no gradient)."""
    c = np.asarray(c, dtype=x.dtype)
    if c.ndim and c.shape != x.shape:
        raise ShapeError(f"constant shape {c.shape} vs tensor {x.shape}")
    return _emit(x.value + c, (x,), lambda g: (g,))


def square(x: Tensor) -> Tensor:
    xv = x.value
    return _emit(xv * xv, (x,), lambda g: (2 * g * xv,))


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _emit(np.where(mask, x.value, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def reshape(x: Tensor, rows: int, cols: int) -> Tensor:
    shape = x.shape
    return _emit(x.value.reshape(rows, cols), (x,), lambda g: (g.reshape(shape),))


def take_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit(x.value[idx], (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    total = np.array([[x.value.sum(dtype=np.float64)]], dtype=x.dtype)
    return _emit(total, (x,), lambda g: (np.broadcast_to(g, shape).astype(g.dtype),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.value.size)


def softmax_rows(x: Tensor) -> Tensor:
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True, dtype=np.float64).astype(x.dtype)
    # subnormal probabilities make every later matmul an order of magnitude slower
    s[s < np.finfo(s.dtype).tiny] = 0

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit(s, (x,), vjp)


def l2_distance_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise Euclidean distance, shape (B, 1)."""
    _same_shape(a, b, "l2_distance_rows")
    diff = a.value - b.value
    d = np.sqrt((diff.astype(np.float64) ** 2).sum(axis=1, keepdims=True) + L2_EPS)

    def vjp(g):
        ga = (g / d) * diff
        return ga.astype(a.dtype), (-ga).astype(b.dtype)

    return _emit(d.astype(a.dtype), (a, b), vjp)


def inner_product_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise dot product, shape (B, 1)."""
    _same_shape(a, b, "inner_product_rows")
    av, bv = a.value, b.value
    ip = (av.astype(np.float64) * bv).sum(axis=1, keepdims=True).astype(a.dtype)
    return _emit(ip, (a, b), lambda g: (g * bv, g * av))


class BatchNormState:
    """Running statistics for one batch-norm layer."""

    def __init__(self, width: int, dtype=DEFAULT_DTYPE, momentum: float = BN_MOMENTUM):
        self.mean = np.zeros((1, width), dtype=dtype)
        self.var = np.ones((1, width), dtype=dtype)
        self.momentum = momentum


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              training: bool) -> Tensor:
    """Per-column normalisation followed by a learned affine map.

    Training mode normalises with batch statistics (biased variance) and
    updates ``state``; evaluation mode uses the running statistics.
    """
    xv = x.value
    if training:
        n = xv.shape[0]
        if n < 2:
            raise ValueError("batchnorm in training mode needs a batch of at least 2 rows")
        x64 = xv.astype(np.float64)
        mu = x64.mean(axis=0, keepdims=True)
        var = ((x64 - mu) ** 2).mean(axis=0, keepdims=True)
        m = state.momentum
        state.mean = (m * state.mean + (1 - m) * mu).astype(state.mean.dtype)
        state.var = (m * state.var + (1 - m) * var * n / (n - 1)).astype(state.var.dtype)
    else:
        mu, var = state.mean.astype(np.float64), state.var.astype(np.float64)
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = ((xv - mu) * inv).astype(xv.dtype)
    gv = gamma.value
    out = xhat * gv + beta.value

    def vjp(g):
        gg = (g * xhat).sum(axis=0, keepdims=True, dtype=np.float64)
        gb = g.sum(axis=0, keepdims=True, dtype=np.float64)
        gxhat = g * gv
        if training:
            n = xv.shape[0]
            gx = inv / n * (n * gxhat - gxhat.sum(axis=0, keepdims=True)
                            - xhat * (gxhat * xhat).sum(axis=0, keepdims=True))
        else:
            gx = gxhat * inv
        return gx.astype(xv.dtype), gg, gb

    return _emit(out, (x, gamma, beta), vjp)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ {a.shape} vs {b.shape}")
