"""Minimal reverse-mode differentiation over 2-D float arrays.

Every value is a matrix. Operations executed while a :class:`Tape` is active
and with at least one differentiable input are appended to that tape; calling
:meth:`Tape.backward` walks the tape in exact reverse order and accumulates
gradients into every node that contributed to the root.

Outside a tape the same functions run as plain forward computations, which is
what evaluation code uses.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class DegenerateVectorError(NumericError):
    pass


_ids = itertools.count()
_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Value:
    """A differentiable matrix: ``value`` plus a same-shaped ``grad`` slot."""

    __slots__ = ("value", "grad", "requires_grad", "node_id", "parents", "backward_fn", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(value, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"Value must be at most 2-D, got shape {arr.shape}")
        self.value = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_ids)
        self.parents: tuple[Value, ...] = ()
        self.backward_fn: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError(f"item() needs a 1x1 value, got {self.shape}")
        return float(self.value[0, 0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Value{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, as_value(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_value(other))

    def __rsub__(self, other):
        return sub(as_value(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, as_value(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, as_value(other))


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def const(x) -> Value:
    return Value(x, requires_grad=False)


def param(x, name: str | None = None) -> Value:
    return Value(x, requires_grad=True, name=name)


class Tape:
    """Ordered record of operations; backward visits it in reverse."""

    def __init__(self):
        self.nodes: list[Value] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, node: Value) -> None:
        self.nodes.append(node)

    def backward(self, root: Value, visit: Callable[[Value], None] | None = None) -> None:
        if root.value.size != 1:
            raise DimensionError(f"backward root must be scalar, got {root.shape}")
        if not np.isfinite(root.value).all():
            raise NumericError("non-finite value at backward root")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            if visit is not None:
                visit(node)
            node.backward_fn(node.grad)


def _make(value: np.ndarray, parents: Sequence[Value], backward_fn) -> Value:
    """Build an output node, recording it only if it is differentiable."""
    out = Value.__new__(Value)
    out.value = value
    out.grad = None
    out.node_id = next(_ids)
    out.name = None
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        tape.record(out)
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


def _send(p: Value, g: np.ndarray) -> None:
    if p.requires_grad:
        p._accumulate(g)


def _check_finite(x: Value, op: str) -> None:
    if not np.isfinite(x.value).all():
        raise NumericError(f"{op}: non-finite input")


def _row_broadcast(b: Value, rows: int, cols: int, op: str, other: tuple[int, int]) -> None:
    if b.shape == (rows, cols):
        return
    if b.shape == (1, cols):
        return
    raise DimensionError(f"{op}: cannot combine shapes {other} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0, keepdims=True)


# ----------------------------------------------------------------------------
# elementwise and linear algebra


def add(a: Value, b: Value) -> Value:
    _row_broadcast(b, *a.shape, "add", a.shape)

    def backward(g):
        _send(a, g)
        _send(b, _unbroadcast(g, b.shape))

    return _make(a.value + b.value, (a, b), backward)


def sub(a: Value, b: Value) -> Value:
    _row_broadcast(b, *a.shape, "sub", a.shape)

    def backward(g):
        _send(a, g)
        _send(b, -_unbroadcast(g, b.shape))

    return _make(a.value - b.value, (a, b), backward)


def mul(a: Value, b: Value) -> Value:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")

    def backward(g):
        _send(a, g * b.value)
        _send(b, g * a.value)

    return _make(a.value * b.value, (a, b), backward)


def scale(a: Value, c: float) -> Value:
    def backward(g):
        _send(a, g * c)

    return _make(a.value * c, (a,), backward)


def matmul(a: Value, b: Value) -> Value:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions of {a.shape} and {b.shape} disagree")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g)

    return _make(a.value @ b.value, (a, b), backward)


def affine(x: Value, W: Value, b: Value) -> Value:
    """``x @ W + b`` with ``b`` broadcast over rows."""
    if x.shape[1] != W.shape[0]:
        raise DimensionError(f"affine: x {x.shape} and W {W.shape} disagree")
    if b.shape != (1, W.shape[1]) and b.shape != (x.shape[0], W.shape[1]):
        raise DimensionError(f"affine: bias {b.shape} does not fit output ({x.shape[0]}, {W.shape[1]})")

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ W.value.T)
        if W.requires_grad:
            W._accumulate(x.value.T @ g)
        _send(b, _unbroadcast(g, b.shape))

    return _make(x.value @ W.value + b.value, (x, W, b), backward)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def sigmoid(x: Value) -> Value:
    _check_finite(x, "sigmoid")
    s = _sigmoid(x.value)

    def backward(g):
        _send(x, g * s * (1.0 - s))

    return _make(s, (x,), backward)


def tanh(x: Value) -> Value:
    _check_finite(x, "tanh")
    t = np.tanh(x.value)

    def backward(g):
        _send(x, g * (1.0 - t * t))

    return _make(t, (x,), backward)


def exp(x: Value) -> Value:
    _check_finite(x, "exp")
    e = np.exp(x.value)

    def backward(g):
        _send(x, g * e)

    return _make(e, (x,), backward)


def log(x: Value) -> Value:
    if (x.value <= 0).any() or not np.isfinite(x.value).all():
        raise NumericError("log: input must be finite and positive")

    def backward(g):
        _send(x, g / x.value)

    return _make(np.log(x.value), (x,), backward)


def softmax(logits: Value) -> Value:
    """Row-wise softmax."""
    _check_finite(logits, "softmax")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        _send(logits, p * (g - (g * p).sum(axis=1, keepdims=True)))

    return _make(p, (logits,), backward)


def log_softmax(logits: Value) -> Value:
    _check_finite(logits, "log_softmax")
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        _send(logits, g - p * g.sum(axis=1, keepdims=True))

    return _make(out, (logits,), backward)


# ----------------------------------------------------------------------------
# reductions and reshaping


def total(x: Value) -> Value:
    """Sum of all entries as a 1x1 value."""

    def backward(g):
        _send(x, np.full(x.shape, g[0, 0]))

    return _make(np.array([[x.value.sum()]]), (x,), backward)


def sum_squares(x: Value) -> Value:
    def backward(g):
        _send(x, 2.0 * g[0, 0] * x.value)

    return _make(np.array([[np.sum(x.value * x.value)]]), (x,), backward)


def mean_of(xs: Sequence[Value]) -> Value:
    """Elementwise mean of equally shaped values."""
    if not xs:
        raise DimensionError("mean_of: empty sequence")
    shape = xs[0].shape
    for x in xs:
        if x.shape != shape:
            raise DimensionError(f"mean_of: shapes {shape} and {x.shape} differ")
    n = len(xs)
    acc = np.zeros(shape, dtype=DTYPE)
    for x in xs:
        acc += x.value

    def backward(g):
        share = g / n
        for x in xs:
            _send(x, share)

    return _make(acc / n, tuple(xs), backward)


def concat_cols(a: Value, b: Value) -> Value:
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_cols: row counts of {a.shape} and {b.shape} differ")
    k = a.shape[1]

    def backward(g):
        _send(a, g[:, :k])
        _send(b, g[:, k:])

    return _make(np.concatenate([a.value, b.value], axis=1), (a, b), backward)


def concat_rows(xs: Sequence[Value]) -> Value:
    cols = xs[0].shape[1]
    for x in xs:
        if x.shape[1] != cols:
            raise DimensionError(f"concat_rows: column counts {cols} and {x.shape[1]} differ")
    bounds = np.cumsum([0] + [x.shape[0] for x in xs])

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            _send(x, g[lo:hi])

    return _make(np.concatenate([x.value for x in xs], axis=0), tuple(xs), backward)


def rows(x: Value, start: int, stop: int) -> Value:
    """Rows ``start:stop`` of ``x``."""
    if not 0 <= start < stop <= x.shape[0]:
        raise DimensionError(f"rows: [{start}, {stop}) outside {x.shape[0]} rows")

    def backward(g):
        if x.requires_grad:
            full = np.zeros(x.shape, dtype=DTYPE)
            full[start:stop] = g
            x._accumulate(full)

    return _make(x.value[start:stop], (x,), backward)


def pick(x: Value, cols: np.ndarray) -> Value:
    """Column ``cols[i]`` of row ``i``, as an (n, 1) value."""
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(x.shape[0])
    if cols.shape != (x.shape[0],):
        raise DimensionError(f"pick: need {x.shape[0]} indices, got {cols.shape}")

    def backward(g):
        if x.requires_grad:
            full = np.zeros(x.shape, dtype=DTYPE)
            full[rows, cols] = g[:, 0]
            x._accumulate(full)

    return _make(x.value[rows, cols][:, None], (x,), backward)


def normalize_rows(x: Value, eps: float = 1e-12) -> Value:
    """Scale every row to unit Euclidean norm."""
    _check_finite(x, "normalize_rows")
    norms = np.sqrt((x.value * x.value).sum(axis=1, keepdims=True))
    if (norms <= eps).any():
        raise DegenerateVectorError("normalize_rows: zero-norm row")
    u = x.value / norms

    def backward(g):
        _send(x, (g - u * (g * u).sum(axis=1, keepdims=True)) / norms)

    return _make(u, (x,), backward)


def cosine_sim(x: Value, y: Value) -> Value:
    """Cosine similarity of two row vectors, as a 1x1 value."""
    if x.shape[0] != 1 or y.shape[0] != 1 or x.shape != y.shape:
        raise DimensionError(f"cosine_sim: expected two equal row vectors, got {x.shape} and {y.shape}")
    return matmul(normalize_rows(x), transpose(normalize_rows(y)))


def transpose(x: Value) -> Value:
    def backward(g):
        _send(x, g.T)

    return _make(x.value.T.copy(), (x,), backward)


# ----------------------------------------------------------------------------
# recurrent cell


@dataclass
class GRUParams:
    """Weights of one GRU layer.

    Gate layout along the last axis of ``Wx`` and ``b`` is (update, reset,
    candidate); ``Uzr`` holds the recurrent weights of the two gates and ``Uh``
    those of the candidate.
    """

    Wx: Value
    Uzr: Value
    Uh: Value
    b: Value

    @property
    def input_dim(self) -> int:
        return self.Wx.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.Uh.shape[0]

    def values(self) -> list[Value]:
        return [self.Wx, self.Uzr, self.Uh, self.b]


def gru_cell(x_t: Value, h_prev: Value, p: GRUParams) -> Value:
    """One GRU step, fused into a single recorded node.

        z  = sigmoid(x Wz + h Uz + bz)
        r  = sigmoid(x Wr + h Ur + br)
        h~ = tanh(x Wh + (r * h) Uh + bh)
        h' = (1 - z) * h + z * h~

    The reset gate multiplies ``h_prev`` before the candidate's recurrent
    product.
    """
    x, h = x_t.value, h_prev.value
    Wx, Uzr, Uh = p.Wx.value, p.Uzr.value, p.Uh.value
    H = Uh.shape[0]
    if x.shape[1] != Wx.shape[0]:
        raise DimensionError(f"gru_cell: input width {x.shape[1]} != {Wx.shape[0]}")
    if h.shape != (x.shape[0], H):
        raise DimensionError(f"gru_cell: h_prev {h.shape} != ({x.shape[0]}, {H})")
    a = x @ Wx
    a += p.b.value
    pre = a[:, : 2 * H]
    pre += h @ Uzr
    zr = 0.5 * (1.0 + np.tanh(0.5 * pre))
    z, r = zr[:, :H], zr[:, H:]
    rh = r * h
    cand = a[:, 2 * H :]
    cand += rh @ Uh
    c = np.tanh(cand)
    out = h + z * (c - h)

    def backward(g):
        dz = g * (c - h)
        dc = g * z
        da_c = dc * (1.0 - c * c)
        drh = da_c @ Uh.T
        dr = drh * h
        da_zr = np.concatenate([dz * z * (1.0 - z), dr * r * (1.0 - r)], axis=1)
        da = np.concatenate([da_zr, da_c], axis=1)
        if h_prev.requires_grad:
            h_prev._accumulate(g * (1.0 - z) + drh * r + da_zr @ Uzr.T)
        if x_t.requires_grad:
            x_t._accumulate(da @ Wx.T)
        if p.Wx.requires_grad:
            p.Wx._accumulate(x.T @ da)
        if p.Uzr.requires_grad:
            p.Uzr._accumulate(h.T @ da_zr)
        if p.Uh.requires_grad:
            p.Uh._accumulate(rh.T @ da_c)
        if p.b.requires_grad:
            p.b._accumulate(da.sum(axis=0, keepdims=True))

    return _make(out, (x_t, h_prev, p.Wx, p.Uzr, p.Uh, p.b), backward)


# ----------------------------------------------------------------------------
# verification


def grad_check(
    fn: Callable[[], Value],
    params: Iterable[Value],
    step: float = 1e-5,
    elementwise: bool = False,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` takes no arguments and reads ``params`` by reference; it is
    re-evaluated with each entry of each parameter perturbed in place.

    Per parameter the error is ``|a - n| / max(|a|, |n|, 1e-8)`` with ``|.|``
    the Euclidean norm over the whole matrix; ``elementwise=True`` applies the
    same ratio to every scalar entry instead, which is dominated by
    finite-difference roundoff on entries far smaller than the loss.
    """
    params = list(params)
    with Tape() as tape:
        root = fn()
    if not np.isfinite(root.value).all():
        raise NumericError("grad_check: non-finite loss")
    for p in params:
        p.grad = None
    tape.backward(root)
    worst = 0.0
    for p in params:
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.value)).reshape(-1)
        numeric = np.empty_like(analytic)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError("grad_check: non-finite loss under perturbation")
            numeric[i] = (up - down) / (2.0 * step)
        if elementwise:
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
            err = float(np.max(np.abs(analytic - numeric) / denom))
        else:
            denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
            err = float(np.linalg.norm(analytic - numeric) / denom)
        worst = max(worst, err)
    return worst
