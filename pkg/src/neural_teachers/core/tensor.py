"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays. When a :class:`Tape` is active and at
least one input requires a gradient, the operation appends a record holding a
closure that maps the output gradient to input gradients. ``Tape.backward``
replays those records in reverse creation order, which is a valid reverse
topological order because a record can only consume tensors that already
exist.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "backward",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "concat",
    "sum",
    "mean",
    "cosine",
    "embedding",
    "embed_bag",
    "take_rows",
    "pick",
]


class ShapeError(ValueError):
    """Raised when operand shapes are not conformable."""


_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")
    # numpy defers to the reflected operators below instead of broadcasting over objects
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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


class _Record:
    __slots__ = ("inputs", "output", "fn")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor, fn: Callable):
        self.inputs = inputs
        self.output = output
        self.fn = fn


class Tape:
    """Ordered log of differentiable primitive applications.

    Use as a context manager; primitives evaluated inside the ``with`` block
    are recorded. Tapes nest, the innermost one receives the records.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPES.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, root: Tensor, leaves: Iterable[Tensor] | None = None) -> list[np.ndarray]:
        return backward(self, root, leaves)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], fn: Callable) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.records.append(_Record(tuple(inputs), out, fn))
    return out


def backward(tape: Tape, root: Tensor, leaves: Iterable[Tensor] | None = None) -> list[np.ndarray]:
    """Populate ``.grad`` on every leaf that ``root`` depends on.

    ``root`` must hold a single value. Leaves passed explicitly always get a
    gradient buffer, zero when ``root`` does not depend on them. Gradients
    overwrite, they do not accumulate across calls. Returns the gradients of
    ``leaves`` in order (empty list when ``leaves`` is None).
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    produced = {id(r.output) for r in tape.records}
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    found: dict[int, Tensor] = {}
    if id(root) not in produced and root.requires_grad:
        found[id(root)] = root
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.fn(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                found[key] = t
    for key, t in found.items():
        t.grad = grads.get(key, np.zeros_like(t.data))
    out = []
    if leaves is not None:
        for t in leaves:
            if id(t) not in found:
                t.grad = np.zeros_like(t.data)
            out.append(t.grad)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def fn(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _record(ad * bd, (a, b), fn)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    ad, bd = a.data, b.data

    def fn(g):
        if ad.ndim == 2 and bd.ndim == 2:
            ga = g @ bd.T if a.requires_grad else None
            gb = ad.T @ g if b.requires_grad else None
        elif ad.ndim == 1 and bd.ndim == 2:
            ga = bd @ g if a.requires_grad else None
            gb = np.outer(ad, g) if b.requires_grad else None
        elif ad.ndim == 2:
            ga = np.outer(g, bd) if a.requires_grad else None
            gb = ad.T @ g if b.requires_grad else None
        else:
            ga, gb = g * bd, g * ad
        return ga, gb

    return _record(ad @ bd, (a, b), fn)


# -- nonlinearities ---------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _record(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _record(np.log(x), (a,), lambda g: (g / x,))


def _log_softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    y = np.exp(_log_softmax(a.data, axis))
    return _record(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    y = _log_softmax(a.data, axis)

    def fn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _record(y, (a,), fn)


# -- structural -------------------------------------------------------------

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} mismatch on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, ts, fn)


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape

    def fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(a.data.sum(axis=axis), (a,), fn)


def mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis), 1.0 / n)


def cosine(a, b) -> Tensor:
    """Cosine similarity along the last axis.

    A zero-norm operand yields similarity 0 with zero gradient.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=-1))
    nb = np.sqrt((bd * bd).sum(axis=-1))
    denom = na * nb
    ok = denom > 0.0
    safe = np.where(ok, denom, 1.0)
    c = np.where(ok, (ad * bd).sum(axis=-1) / safe, 0.0)

    def fn(g):
        g = np.where(ok, g, 0.0)[..., None]
        ce = c[..., None]
        sa = np.where(na > 0, na, 1.0)[..., None]
        sb = np.where(nb > 0, nb, 1.0)[..., None]
        den = safe[..., None]
        ga = g * (bd / den - ce * ad / (sa * sa)) if a.requires_grad else None
        gb = g * (ad / den - ce * bd / (sb * sb)) if b.requires_grad else None
        return ga, gb

    return _record(c, (a, b), fn)


# -- indexing ---------------------------------------------------------------

def embedding(table, ids) -> Tensor:
    """Rows ``table[ids]`` for an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]

    def fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise ShapeError(f"embedding: ids outside [0, {rows})")
    return _record(table.data[ids], (table,), fn)


def embed_bag(table, bags: Sequence[Sequence[int]], mode: str = "sum") -> Tensor:
    """One row per bag: the sum (or mean) of the table rows it names.

    Empty bags give a zero row.
    """
    if mode not in ("sum", "mean"):
        raise ValueError(f"unknown bag mode {mode!r}")
    table = as_tensor(table)
    n, dim = len(bags), table.shape[1]
    lengths = np.array([len(b) for b in bags], dtype=np.int64)
    flat = np.fromiter((i for b in bags for i in b), dtype=np.int64, count=int(lengths.sum()))
    owner = np.repeat(np.arange(n), lengths)
    if flat.size and (flat.min() < 0 or flat.max() >= table.shape[0]):
        raise ShapeError(f"embed_bag: ids outside [0, {table.shape[0]})")
    weight = np.ones(flat.size)
    if mode == "mean":
        weight = 1.0 / lengths[owner]
    out = np.zeros((n, dim))
    np.add.at(out, owner, table.data[flat] * weight[:, None])

    def fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, flat, g[owner] * weight[:, None])
        return (gt,)

    return _record(out, (table,), fn)


def take_rows(x, idx) -> Tensor:
    """Rows of a 2-D tensor by index; index -1 yields a zero row."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    out = x.data[safe] * valid[:, None]

    def fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, safe[valid], g[valid])
        return (gx,)

    return _record(out, (x,), fn)


def pick(x, idx) -> Tensor:
    """``x[i, idx[i]]`` for a 2-D tensor, giving a 1-D tensor."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick: tensor {x.shape} with index {idx.shape}")
    rows = np.arange(x.shape[0])

    def fn(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return _record(x.data[rows, idx], (x,), fn)
