"""Dense float64 tensors with a define-by-run reverse-mode tape.

A :class:`Tensor` either lives on a :class:`Tape` (it has a ``node_id``) or is
a constant.  Every operation whose inputs touch a tape appends one node to
that tape; :meth:`Tape.backward` then walks the nodes once in reverse
insertion order.  A fresh tape is meant to be created for every forward pass.

Broadcasting is deliberately limited to scalar <-> tensor.  The one shaped
exception is :func:`add_bias`, which adds a row vector to every row of a
matrix.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence, Union

import numpy as np

PROB_FLOOR = 1e-12
LN2 = math.log(2.0)

Scalar = Union[int, float]
VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ContractError(RuntimeError):
    """An API precondition was violated."""


class Tensor:
    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: Optional["Tape"] = None, node_id: Optional[int] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def requires_grad(self) -> bool:
        return self.node_id is not None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        kind = f"node={self.node_id}" if self.requires_grad else "const"
        return f"Tensor({self.data!r}, {kind})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)


class Tape:
    """Append-only record of operations; parents always precede children."""

    def __init__(self):
        self._shapes: list[tuple] = []
        self._ops: list[str] = []
        self._parents: list[tuple[Optional[int], ...]] = []
        self._vjps: list[Optional[VJP]] = []
        self.grads: Optional[list[Optional[np.ndarray]]] = None

    def __len__(self) -> int:
        return len(self._ops)

    def variable(self, data) -> Tensor:
        """Register a leaf that should receive a gradient."""
        arr = np.array(data, dtype=np.float64)
        return Tensor(arr, self, self._append("leaf", arr.shape, (), None))

    def _append(self, op, shape, parents, vjp) -> int:
        self._ops.append(op)
        self._shapes.append(shape)
        self._parents.append(parents)
        self._vjps.append(vjp)
        return len(self._ops) - 1

    def ops(self) -> list[str]:
        return list(self._ops)

    def backward(self, root: Tensor) -> "Gradients":
        if root.tape is not self or root.node_id is None:
            raise ContractError("backward root must be produced on this tape")
        if root.data.size != 1 or root.ndim != 0:
            raise ContractError(f"backward root must be a scalar, got shape {root.shape}")
        grads: list[Optional[np.ndarray]] = [None] * len(self._ops)
        grads[root.node_id] = np.ones((), dtype=np.float64)
        for i in range(root.node_id, -1, -1):
            g = grads[i]
            vjp = self._vjps[i]
            if g is None or vjp is None:
                continue
            for pid, pg in zip(self._parents[i], vjp(g)):
                if pid is None or pg is None:
                    continue
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg
        self.grads = grads
        return Gradients(self)

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient accumulated at ``t``; zeros for constants and unreached nodes."""
        if self.grads is None:
            raise ContractError("backward has not been run on this tape")
        if t.node_id is None or t.tape is not self:
            return np.zeros(t.shape)
        g = self.grads[t.node_id]
        if g is None:
            return np.zeros(self._shapes[t.node_id])
        return np.broadcast_to(g, self._shapes[t.node_id]).astype(np.float64, copy=True)


class Gradients:
    """Mapping view from tensors to their gradients after a backward pass."""

    def __init__(self, tape: Tape):
        self._tape = tape

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self._tape.grad(t)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    tape = None
    for t in inputs:
        if t.node_id is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ContractError("operands live on different tapes")
    if tape is None:
        return Tensor(out)
    parents = tuple(t.node_id for t in inputs)
    return Tensor(out, tape, tape._append(op, out.shape, parents, vjp))


def custom_op(op: str, out, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    """Record ``out`` as a function of ``inputs`` with a caller-supplied backward.

    ``vjp(g)`` must return one gradient (or ``None``) per input.
    """
    return _record(op, np.asarray(out, dtype=np.float64), [as_tensor(t) for t in inputs], vjp)


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (only scalar broadcast)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _record("div", out, (a, b),
                   lambda g: (_unbroadcast(g / bd, ad.shape),
                              _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def exp2(a) -> Tensor:
    """Elementwise ``2**a``."""
    a = as_tensor(a)
    out = np.exp2(a.data)
    return _record("exp2", out, (a,), lambda g: (g * LN2 * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


def clamp(a, lo: float = PROB_FLOOR, hi: float = 1.0) -> Tensor:
    """Clip into ``[lo, hi]``; gradient passes only where the value was inside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record("clamp", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _record("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def prelu(a, slope: float = 0.25) -> Tensor:
    """Leaky rectifier with a fixed negative-side slope."""
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _record("prelu", a.data * scale, (a,), lambda g: (g * scale,))


def detach(a) -> Tensor:
    """Same values, no tape node: downstream gradients stop here."""
    return Tensor(as_tensor(a).data.copy())


def tsum(a, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return _record("sum", np.asarray(a.data.sum()), (a,),
                       lambda g: (np.broadcast_to(g, shape),))
    ax = axis % a.ndim
    return _record("sum", a.data.sum(axis=ax), (a,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape),))


def mean(a, axis: Optional[int] = None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis) * (1.0 / n)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _record("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add_bias(x, b) -> Tensor:
    """``x[N, K] + b[K]`` with ``b`` added to every row."""
    x, b = as_tensor(x), as_tensor(b)
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add {b.shape} to rows of {x.shape}")
    return _record("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def gather(a, index) -> Tensor:
    """Pick one entry per row: ``a[C]`` with an int, or ``a[N, C]`` with ``index[N]``."""
    a = as_tensor(a)
    shape = a.shape
    if a.ndim == 1:
        i = int(index)
        if not -shape[0] <= i < shape[0]:
            raise IndexError(f"gather index {i} out of range for length {shape[0]}")

        def vjp(g):
            out = np.zeros(shape)
            out[i] = g
            return (out,)

        return _record("gather", np.asarray(a.data[i]), (a,), vjp)
    idx = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (shape[0],):
        raise ShapeError(f"gather: index shape {idx.shape} does not match rows of {shape}")
    rows = np.arange(shape[0])

    def vjp(g):
        out = np.zeros(shape)
        out[rows, idx] = g
        return (out,)

    return _record("gather", a.data[rows, idx], (a,), vjp)


def masked_select(a, mask) -> Tensor:
    """Keep entries where ``mask`` is true.

    For a matrix every row must keep the same number of entries and the
    result is ``[N, k]``; for a vector the result is ``[k]``.
    """
    a = as_tensor(a)
    m = np.asarray(mask, dtype=bool)
    if m.shape != a.shape:
        raise ShapeError(f"masked_select: mask {m.shape} does not match {a.shape}")
    shape = a.shape
    picked = a.data[m]
    if a.ndim == 2:
        counts = m.sum(axis=1)
        if counts.size and not np.all(counts == counts[0]):
            raise ShapeError("masked_select: rows keep different numbers of entries")
        picked = picked.reshape(shape[0], int(counts[0]) if counts.size else 0)

    def vjp(g):
        out = np.zeros(shape)
        out[m] = g.reshape(-1)
        return (out,)

    return _record("masked_select", picked, (a,), vjp)


def log_softmax(z, temperature: float = 1.0) -> Tensor:
    """``log softmax(z / T)`` along the last axis, max-subtracted.

    >>> np.round(np.exp(log_softmax(Tensor([2.0, 1.0, 0.0])).data), 5)
    array([0.66524, 0.24473, 0.09003])
    """
    z = as_tensor(z)
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if z.shape[-1] < 1:
        raise ShapeError("log_softmax over an empty axis")
    if not np.all(np.isfinite(z.data)):
        raise NumericError("log_softmax input contains non-finite values")
    u = z.data / temperature
    u = u - u.max(axis=-1, keepdims=True)
    out = u - np.log(np.exp(u).sum(axis=-1, keepdims=True))
    p = np.exp(out)

    def vjp(g):
        return ((g - p * g.sum(axis=-1, keepdims=True)) / temperature,)

    return _record("log_softmax", out, (z,), vjp)


def softmax(z, temperature: float = 1.0) -> Tensor:
    return exp(log_softmax(z, temperature))
