"""Minimal reverse-mode differentiation over dense matrices.

Every array is a 2-D matrix. Operations come from a fixed set with
hand-written backward rules; a :class:`Tape` records those applied to values
that require gradients, and :func:`backward` replays the records in reverse.

Example
-------
>>> x = Value([[1.0, 2.0]], requires_grad=True)
>>> with Tape() as tape:
...     loss = sum_all(square(x))
>>> tape.backward(loss)[x.id]
array([[2., 4.]])
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

__all__ = [
    "Value", "Tape", "NonFiniteError", "OP_KINDS", "record", "backward",
    "strict_mode", "active_tape", "matmul", "add", "sub", "mul", "scale",
    "tanh", "lncosh", "softplus", "relu", "square", "sum_all", "concat",
    "slice_", "transpose", "scatter_sum", "gather", "layernorm", "neg",
    "jacobian", "gradient_check",
]

_ids = itertools.count()
_TAPES: list["Tape"] = []
_STRICT = [True]
_LOG2 = float(np.log(2.0))


class NonFiniteError(ArithmeticError):
    """Raised when an operation produces NaN or Inf under strict mode."""


class Value:
    """A dense matrix that may participate in gradient recording.

    Scalars become 1x1 and 1-D input becomes a column vector.
    """

    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        elif arr.ndim != 2:
            raise ValueError(f"Value must be at most 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a 1x1 value")
        return float(self.data[0, 0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Value(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class _Record:
    __slots__ = ("kind", "inputs", "out", "saved")

    def __init__(self, kind, inputs, out, saved):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.saved = saved


class Tape:
    """Ordered log of recorded operations.

    Use as a context manager; operations executed inside the block whose
    inputs require gradients are appended in execution order.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._produced: set[int] = set()

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def _append(self, rec: _Record):
        self.records.append(rec)
        self._produced.add(rec.out.id)

    def backward(self, output: Value, seed=None, wrt: Iterable[Value] | None = None) -> dict[int, np.ndarray]:
        """Propagate ``seed`` (default 1 for a scalar output) back to the leaves.

        Returns a map from leaf value id to its gradient. Ids listed in ``wrt``
        that receive no gradient map to zero matrices.
        """
        if seed is None:
            if output.shape != (1, 1):
                raise ValueError(f"backward needs a scalar (1x1) loss, got shape {output.shape}")
            seed = np.ones((1, 1), dtype=output.dtype)
        else:
            seed = np.asarray(seed, dtype=output.dtype).reshape(output.shape)
        grads: dict[int, np.ndarray] = {output.id: seed}
        for rec in reversed(self.records):
            g = grads.pop(rec.out.id, None)
            if g is None:
                continue
            in_grads = _BACKWARD[rec.kind](rec, g)
            for v, gv in zip(rec.inputs, in_grads):
                if gv is None or not v.requires_grad:
                    continue
                prev = grads.get(v.id)
                grads[v.id] = gv if prev is None else prev + gv
        leaves = {k: v for k, v in grads.items() if k not in self._produced}
        if wrt is not None:
            for p in wrt:
                if p.id not in leaves:
                    leaves[p.id] = np.zeros_like(p.data)
        return leaves


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


@contextlib.contextmanager
def strict_mode(enabled: bool = True):
    """Toggle NaN/Inf detection at operation boundaries."""
    old = _STRICT[0]
    _STRICT[0] = bool(enabled)
    try:
        yield
    finally:
        _STRICT[0] = old


def _as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


def _check_broadcast(kind, a, b):
    sa, sb = a.shape, b.shape
    for x, y in zip(sa, sb):
        if x != y and x != 1 and y != 1:
            raise ValueError(f"{kind}: shape mismatch {sa} vs {sb}")


# ---------------------------------------------------------------- forward rules

def _f_matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    return a.data @ b.data, None


def _f_add(a, b):
    _check_broadcast("add", a, b)
    return a.data + b.data, None


def _f_sub(a, b):
    _check_broadcast("sub", a, b)
    return a.data - b.data, None


def _f_mul(a, b):
    _check_broadcast("mul", a, b)
    return a.data * b.data, None


def _f_scale(a, factor):
    return a.data * factor, factor


def _f_tanh(a):
    y = np.tanh(a.data)
    return y, y


def _f_lncosh(a):
    x = a.data
    ax = np.abs(x)
    return ax + np.log1p(np.exp(-2.0 * ax)) - _LOG2, None


def _f_softplus(a):
    x = a.data
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))), None


def _f_relu(a):
    return np.maximum(a.data, 0.0), None


def _f_square(a):
    return a.data * a.data, None


def _f_sum(a):
    return np.sum(a.data, dtype=a.dtype).reshape(1, 1), None


def _f_concat(*vals, axis=1):
    if axis not in (0, 1):
        raise ValueError("concat axis must be 0 or 1")
    other = 1 - axis
    if len({v.shape[other] for v in vals}) != 1:
        raise ValueError("concat: shape mismatch")
    sizes = [v.shape[axis] for v in vals]
    return np.concatenate([v.data for v in vals], axis=axis), (axis, sizes)


def _f_slice(a, rows=None, cols=None):
    rows = slice(None) if rows is None else rows
    cols = slice(None) if cols is None else cols
    return np.ascontiguousarray(a.data[rows, cols]), (rows, cols)


def _f_transpose(a):
    return np.ascontiguousarray(a.data.T), None


def _f_scatter(a, index, n):
    return kernels.scatter_add_rows(a.data, index, n), (index, n)


def _f_gather(a, index):
    return kernels.gather_rows(a.data, index), index


def _f_layernorm(a, eps=1e-5):
    x = a.data
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    y = xc * inv
    return y, (y, inv)


# --------------------------------------------------------------- backward rules

def _b_matmul(rec, g):
    a, b = rec.inputs
    return (g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None)


def _b_add(rec, g):
    a, b = rec.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _b_sub(rec, g):
    a, b = rec.inputs
    return _unbroadcast(g, a.shape), (_unbroadcast(-g, b.shape) if b.requires_grad else None)


def _b_mul(rec, g):
    a, b = rec.inputs
    return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)


def _b_scale(rec, g):
    return (g * rec.saved,)


def _b_tanh(rec, g):
    y = rec.saved
    return (g * (1.0 - y * y),)


def _b_lncosh(rec, g):
    return (g * np.tanh(rec.inputs[0].data),)


def _b_softplus(rec, g):
    x = rec.inputs[0].data
    # numerically stable logistic
    e = np.exp(-np.abs(x))
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return (g * sig,)


def _b_relu(rec, g):
    return (g * (rec.inputs[0].data > 0),)


def _b_square(rec, g):
    return (2.0 * g * rec.inputs[0].data,)


def _b_sum(rec, g):
    a = rec.inputs[0]
    return (np.full(a.shape, g[0, 0], dtype=a.dtype),)


def _b_concat(rec, g):
    axis, sizes = rec.saved
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


def _b_slice(rec, g):
    a = rec.inputs[0]
    rows, cols = rec.saved
    out = np.zeros_like(a.data)
    out[rows, cols] = g
    return (out,)


def _b_transpose(rec, g):
    return (np.ascontiguousarray(g.T),)


def _b_scatter(rec, g):
    index, _ = rec.saved
    return (kernels.gather_rows(g, index),)


def _b_gather(rec, g):
    a = rec.inputs[0]
    return (kernels.scatter_add_rows(g, rec.saved, a.shape[0]),)


def _b_layernorm(rec, g):
    y, inv = rec.saved
    gm = g.mean(axis=1, keepdims=True)
    gym = (g * y).mean(axis=1, keepdims=True)
    return (inv * (g - gm - y * gym),)


_FORWARD: dict[str, Callable] = {
    "matmul": _f_matmul, "add": _f_add, "sub": _f_sub, "mul": _f_mul,
    "scale": _f_scale, "tanh": _f_tanh, "lncosh": _f_lncosh,
    "softplus": _f_softplus, "relu": _f_relu, "square": _f_square,
    "sum": _f_sum, "concat": _f_concat, "slice": _f_slice,
    "transpose": _f_transpose, "scatter_sum": _f_scatter,
    "gather": _f_gather, "layernorm": _f_layernorm,
}
_BACKWARD: dict[str, Callable] = {
    "matmul": _b_matmul, "add": _b_add, "sub": _b_sub, "mul": _b_mul,
    "scale": _b_scale, "tanh": _b_tanh, "lncosh": _b_lncosh,
    "softplus": _b_softplus, "relu": _b_relu, "square": _b_square,
    "sum": _b_sum, "concat": _b_concat, "slice": _b_slice,
    "transpose": _b_transpose, "scatter_sum": _b_scatter,
    "gather": _b_gather, "layernorm": _b_layernorm,
}
OP_KINDS = frozenset(_FORWARD)


def record(op_kind: str, *inputs, **attrs) -> Value:
    """Apply ``op_kind`` to ``inputs`` and log it on the active tape.

    A record is appended only when a tape is active and at least one input
    requires gradients.
    """
    fwd = _FORWARD.get(op_kind)
    if fwd is None:
        raise ValueError(f"unknown op kind {op_kind!r}")
    vals = tuple(_as_value(x) for x in inputs)
    data, saved = fwd(*vals, **attrs)
    if _STRICT[0] and not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite output from {op_kind}")
    tape = _TAPES[-1] if _TAPES else None
    needs = tape is not None and any(v.requires_grad for v in vals)
    out = Value(data, requires_grad=needs)
    if needs:
        tape._append(_Record(op_kind, vals, out, saved))
    return out


def backward(loss: Value, wrt: Iterable[Value] | None = None, tape: Tape | None = None) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every recorded leaf."""
    tape = tape or active_tape()
    if tape is None or not tape.records:
        raise ValueError("backward requires a non-empty tape")
    return tape.backward(loss, wrt=wrt)


# ------------------------------------------------------------------- op sugar

def matmul(a, b):
    return record("matmul", a, b)


def add(a, b):
    return record("add", a, b)


def sub(a, b):
    return record("sub", a, b)


def mul(a, b):
    return record("mul", a, b)


def scale(a, factor: float):
    return record("scale", a, factor=float(factor))


def neg(a):
    return record("scale", a, factor=-1.0)


def tanh(a):
    return record("tanh", a)


def lncosh(a):
    return record("lncosh", a)


def softplus(a):
    return record("softplus", a)


def relu(a):
    return record("relu", a)


def square(a):
    return record("square", a)


def sum_all(a):
    return record("sum", a)


def concat(values: Sequence, axis: int = 1):
    return record("concat", *values, axis=axis)


def slice_(a, rows=None, cols=None):
    return record("slice", a, rows=rows, cols=cols)


def transpose(a):
    return record("transpose", a)


def scatter_sum(values, index: np.ndarray, n: int):
    """Sum edge rows into node rows: ``out[index[e]] += values[e]``."""
    return record("scatter_sum", values, index=np.asarray(index, dtype=np.int64), n=int(n))


def gather(x, index: np.ndarray):
    """Select node rows per edge: ``out[e] = x[index[e]]``."""
    return record("gather", x, index=np.asarray(index, dtype=np.int64))


def layernorm(a, eps: float = 1e-5):
    """Row-wise normalization to zero mean and unit variance (no affine part)."""
    return record("layernorm", a, eps=float(eps))


# ------------------------------------------------------------------ utilities

def jacobian(fn: Callable[[Value], Value], x: np.ndarray) -> np.ndarray:
    """Full Jacobian of ``fn`` at ``x`` by one reverse sweep per output entry.

    Entries are flattened row-major; the result has shape (out.size, x.size).
    """
    xv = Value(np.array(x, copy=True), requires_grad=True)
    with Tape() as tape:
        out = fn(xv)
    jac = np.zeros((out.data.size, xv.data.size), dtype=out.dtype)
    seed = np.zeros(out.data.size, dtype=out.dtype)
    for k in range(out.data.size):
        seed[k] = 1.0
        g = tape.backward(out, seed=seed, wrt=[xv])
        jac[k] = g[xv.id].ravel()
        seed[k] = 0.0
    return jac


def gradient_check(f: Callable[[Sequence[Value]], Value], params: Sequence[Value], h: float = 1e-5,
                   max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    The error per entry is ``|analytic - numeric| / max(1, |numeric|)``.
    ``max_entries`` limits the number of checked entries per parameter (chosen
    at random with ``seed``); by default every entry is checked.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError("step h must lie in [1e-7, 1e-4]")
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("gradient_check requires 64-bit parameters")
    with Tape() as tape:
        out = f(params)
    if out.shape != (1, 1):
        raise ValueError("gradient_check needs a scalar-valued function")
    analytic = tape.backward(out, wrt=params) if tape.records else {p.id: np.zeros_like(p.data) for p in params}
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        ga = analytic[p.id].reshape(-1)
        for k in idx:
            old = flat[k]
            flat[k] = old + h
            fp = f(params).item()
            flat[k] = old - h
            fm = f(params).item()
            flat[k] = old
            num = (fp - fm) / (2.0 * h)
            worst = max(worst, abs(ga[k] - num) / max(1.0, abs(num)))
    return worst
