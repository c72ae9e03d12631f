"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations are recorded onto an explicit :class:`Tape` while one is active
(define-by-run). Outside a ``with Tape()`` block nothing is recorded, which is
how evaluation-only code avoids paying for the graph.

Broadcasting is deliberately narrow: two operands of an elementwise op must
have equal shapes, or one shape must be a suffix of the other (leading
dimension expansion, e.g. ``(N, L) + (L,)``). Anything else has to go through
the explicit ``broadcast`` op.

Typical use::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = (w * w).sum()
    backward(loss, tape)
    w.grad  # -> array([2., 2., 2.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "TapeConsumedError",
    "Tensor",
    "Tape",
    "Node",
    "Segments",
    "OP_KINDS",
    "forward_op",
    "backward",
    "finite_diff_grad",
    "jacobian",
    "current_tape",
    "concat",
    "broadcast",
    "scatter",
    "softplus",
]


class AutodiffError(Exception):
    """Base class for errors raised by the autodiff layer."""


class ShapeError(AutodiffError, ValueError):
    pass


class DomainError(AutodiffError, ValueError):
    """An op was applied outside the real domain of its definition."""


class NonFiniteError(AutodiffError, ArithmeticError):
    pass


class TapeConsumedError(AutodiffError, RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 1000  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        rg = " requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag}{rg})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return forward_op("add", (self, other))

    def __radd__(self, other):
        return forward_op("add", (other, self))

    def __sub__(self, other):
        return forward_op("sub", (self, other))

    def __rsub__(self, other):
        return forward_op("sub", (other, self))

    def __mul__(self, other):
        return forward_op("mul", (self, other))

    def __rmul__(self, other):
        return forward_op("mul", (other, self))

    def __truediv__(self, other):
        return forward_op("div", (self, other))

    def __rtruediv__(self, other):
        return forward_op("div", (other, self))

    def __neg__(self):
        return forward_op("neg", (self,))

    def __pow__(self, other):
        return forward_op("pow", (self, other))

    def __rpow__(self, other):
        return forward_op("pow", (other, self))

    def __matmul__(self, other):
        return forward_op("matmul", (self, other))

    def __rmatmul__(self, other):
        return forward_op("matmul", (other, self))

    def __getitem__(self, key):
        return forward_op("slice", (self,), key=key)

    # -- method forms ------------------------------------------------------
    def relu(self):
        return forward_op("relu", (self,))

    def exp(self):
        return forward_op("exp", (self,))

    def log(self):
        return forward_op("log", (self,))

    def sum(self, axis=None, keepdims=False, segments=None):
        return forward_op("sum_reduce", (self,), axis=axis, keepdims=keepdims, segments=segments)

    def mean(self, axis=None, keepdims=False, segments=None):
        return forward_op("mean_reduce", (self,), axis=axis, keepdims=keepdims, segments=segments)

    def max(self, axis=None, keepdims=False, segments=None):
        return forward_op("max_reduce", (self,), axis=axis, keepdims=keepdims, segments=segments)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return forward_op("reshape", (self,), shape=shape)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _check_finite(arr: np.ndarray, where: str) -> None:
    # A single reduction is cheaper than isfinite() and any NaN/Inf poisons
    # the sum; only a suspicious sum (possibly plain overflow) needs the scan.
    if np.isfinite(np.add.reduce(arr, axis=None)):
        return
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {where}")


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray, Sequence[bool]], Sequence[np.ndarray | None]]


_local = threading.local()


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def current_tape() -> "Tape | None":
    st = _stack()
    return st[-1] if st else None


class Tape:
    """Ordered record of differentiable ops; one backward pass per recording."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        st = _stack()
        if st and st[-1] is self:
            st.pop()
        elif self in st:
            st.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def _record(self, node: Node) -> None:
        if self.consumed:
            raise TapeConsumedError("tape already consumed by backward(); call reset() first")
        self.nodes.append(node)


# ---------------------------------------------------------------------------
# Segmented reductions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Segments:
    """Contiguous grouping of the rows of a 2-D+ array (sets laid end to end).

    ``ids[r]`` is the segment of row ``r``; rows of one segment are adjacent.
    """

    ids: np.ndarray
    starts: np.ndarray
    counts: np.ndarray

    @classmethod
    def from_counts(cls, counts) -> "Segments":
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 1:
            raise ShapeError("segment counts must be 1-D")
        if (counts < 0).any():
            raise ValueError("segment counts must be non-negative")
        starts = np.concatenate(([0], np.cumsum(counts)[:-1])).astype(np.int64)
        ids = np.repeat(np.arange(len(counts), dtype=np.int64), counts)
        return cls(ids=ids, starts=starts, counts=counts)

    @property
    def num_segments(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def require_nonempty(self) -> None:
        if (self.counts == 0).any():
            bad = int(np.flatnonzero(self.counts == 0)[0])
            raise ValueError(f"segment {bad} is empty")


# ---------------------------------------------------------------------------
# Op kernels. Each returns (output array, vjp) where
# vjp(g, needs) -> per-input gradients (None where not needed).
# ---------------------------------------------------------------------------


def _suffix_compatible(a: tuple, b: tuple) -> bool:
    if a == b:
        return True
    short, long_ = (a, b) if len(a) < len(b) else (b, a)
    return len(short) < len(long_) and long_[len(long_) - len(short):] == short


def _check_elementwise(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    if not _suffix_compatible(a.shape, b.shape):
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _op_add(a, b):
    _check_elementwise("add", a, b)

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return a + b, vjp


def _op_sub(a, b):
    _check_elementwise("sub", a, b)

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                -_unbroadcast(g, b.shape) if needs[1] else None)

    return a - b, vjp


def _op_mul(a, b):
    _check_elementwise("mul", a, b)

    def vjp(g, needs):
        return (_unbroadcast(g * b, a.shape) if needs[0] else None,
                _unbroadcast(g * a, b.shape) if needs[1] else None)

    return a * b, vjp


def _op_div(a, b):
    _check_elementwise("div", a, b)
    if (b == 0).any():
        raise DomainError("div: division by zero")
    out = a / b

    def vjp(g, needs):
        return (_unbroadcast(g / b, a.shape) if needs[0] else None,
                _unbroadcast(-g * out / b, b.shape) if needs[1] else None)

    return out, vjp


def _op_neg(a):
    return -a, lambda g, needs: (-g,)


def _op_matmul(a, b):
    if b.ndim != 2 or a.ndim < 1:
        raise ShapeError(f"matmul: right operand must be 2-D, got shapes {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = a @ b

    def vjp(g, needs):
        ga = gb = None
        if needs[0]:
            ga = g @ b.T
        if needs[1]:
            a2 = a.reshape(-1, a.shape[-1])
            g2 = g.reshape(-1, b.shape[1])
            gb = a2.T @ g2
        return ga, gb

    return out, vjp


def _op_relu(a):
    out = np.maximum(a, 0.0)
    return out, lambda g, needs: (g * (out > 0),)


def _op_exp(a):
    if a.size and a.max() >= 709.0:
        raise NonFiniteError("exp: overflow (argument >= 709)")
    out = np.exp(a)
    return out, lambda g, needs: (g * out,)


def _op_log(a):
    if (a <= 0).any():
        raise DomainError("log: argument must be strictly positive")
    return np.log(a), lambda g, needs: (g / a,)


def _op_pow(a, b):
    _check_elementwise("pow", a, b)
    integral = np.all(b == np.round(b))
    if not integral and (a <= 0).any():
        raise DomainError("pow: non-integer exponent needs a strictly positive base")
    if integral and ((a == 0) & (b < 0)).any():
        raise DomainError("pow: zero base with negative exponent")
    out = np.power(a, b)

    def vjp(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(g * b * np.power(a, b - 1.0), a.shape)
        if needs[1]:
            if (a <= 0).any():
                raise DomainError("pow: gradient w.r.t. exponent needs a strictly positive base")
            gb = _unbroadcast(g * out * np.log(a), b.shape)
        return ga, gb

    return out, vjp


def _op_softplus(a):
    out = np.logaddexp(0.0, a)
    sig = np.exp(-np.logaddexp(0.0, -a))
    return out, lambda g, needs: (g * sig,)


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)) if keepdims else g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _check_segments(a, segments, axis):
    if axis not in (None, 0):
        raise ShapeError("segmented reductions run along axis 0")
    if a.ndim < 1 or a.shape[0] != segments.total:
        raise ShapeError(f"segments cover {segments.total} rows but tensor has shape {a.shape}")
    segments.require_nonempty()


def _op_sum_reduce(a, axis=None, keepdims=False, segments=None):
    if segments is not None:
        _check_segments(a, segments, axis)
        out = np.add.reduceat(a, segments.starts, axis=0)
        return out, lambda g, needs: (g[segments.ids],)
    axis = _norm_axis(axis, a.ndim)
    out = np.sum(a, axis=axis, keepdims=keepdims)
    return out, lambda g, needs: (_expand_reduced(g, a.shape, axis, keepdims),)


def _op_mean_reduce(a, axis=None, keepdims=False, segments=None):
    if segments is not None:
        _check_segments(a, segments, axis)
        cnt = segments.counts.astype(np.float64).reshape((-1,) + (1,) * (a.ndim - 1))
        out = np.add.reduceat(a, segments.starts, axis=0) / cnt
        return out, lambda g, needs: ((g / cnt)[segments.ids],)
    axis = _norm_axis(axis, a.ndim)
    if a.size == 0:
        raise ShapeError("mean of an empty tensor")
    n = a.size if axis is None else a.shape[axis]
    out = np.mean(a, axis=axis, keepdims=keepdims)
    return out, lambda g, needs: (_expand_reduced(g / n, a.shape, axis, keepdims),)


def _op_max_reduce(a, axis=None, keepdims=False, segments=None):
    # ties route the gradient to the first maximal index
    if segments is not None:
        _check_segments(a, segments, axis)
        out = np.maximum.reduceat(a, segments.starts, axis=0)
        rows = a.shape[0]
        hit = a == out[segments.ids]
        ridx = np.arange(rows).reshape((-1,) + (1,) * (a.ndim - 1))
        cand = np.where(hit, ridx, rows)
        first = np.minimum.reduceat(cand, segments.starts, axis=0)

        def vjp(g, needs):
            ga = np.zeros_like(a)
            rest = np.indices(first.shape)[1:]
            np.add.at(ga, (first, *rest), g)
            return (ga,)

        return out, vjp
    axis = _norm_axis(axis, a.ndim)
    if axis is None:
        idx = int(np.argmax(a))
        out = a.reshape(-1)[idx]
        out = np.reshape(out, (1,) * a.ndim) if keepdims else np.asarray(out)

        def vjp(g, needs):
            ga = np.zeros(a.size)
            ga[idx] = float(np.reshape(g, -1)[0])
            return (ga.reshape(a.shape),)

        return out, vjp
    idx = np.expand_dims(np.argmax(a, axis=axis), axis)
    out = np.take_along_axis(a, idx, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g, needs):
        ga = np.zeros_like(a)
        gk = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(ga, idx, gk, axis=axis)
        return (ga,)

    return out, vjp


def _op_concat(*arrays, axis=-1):
    if not arrays:
        raise ShapeError("concat of nothing")
    nd = arrays[0].ndim
    ax = _norm_axis(axis, nd)
    for x in arrays:
        if x.ndim != nd or x.shape[:ax] + x.shape[ax + 1:] != arrays[0].shape[:ax] + arrays[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in arrays]}")
    out = np.concatenate(arrays, axis=ax)
    bounds = np.cumsum([x.shape[ax] for x in arrays])[:-1]

    def vjp(g, needs):
        return tuple(np.split(g, bounds, axis=ax))

    return out, vjp


def _is_basic_key(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, np.integer)) or k is Ellipsis or k is None for k in items)


def _op_slice(a, key=None):
    try:
        out = np.array(a[key])  # copy; keeps 0-d results 0-d
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from None
    basic = _is_basic_key(key)

    def vjp(g, needs):
        ga = np.zeros_like(a)
        if basic:
            ga[key] = g
        else:
            np.add.at(ga, key, g)
        return (ga,)

    return out, vjp


def _op_scatter(a, shape=None, key=None):
    # inverse of a duplicate-free gather: place `a` at `key` inside zeros(shape)
    out = np.zeros(shape)
    try:
        out[key] = a
    except (IndexError, ValueError) as exc:
        raise ShapeError(f"scatter: {exc}") from None
    return out, lambda g, needs: (np.ascontiguousarray(g[key]),)


def _op_broadcast(a, shape=None):
    shape = tuple(shape)
    try:
        out = np.array(np.broadcast_to(a, shape))
    except ValueError:
        raise ShapeError(f"broadcast: cannot expand {a.shape} to {shape}") from None

    def vjp(g, needs):
        g = _unbroadcast(g, a.shape)
        ones = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape[len(shape) - a.ndim:])) if s == 1 and t != 1)
        if ones:
            g = g.sum(axis=ones, keepdims=True)
        return (g,)

    return out, vjp


def _op_reshape(a, shape=None):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return out, lambda g, needs: (g.reshape(a.shape),)


_OPS: dict[str, Callable] = {
    "matmul": _op_matmul,
    "add": _op_add,
    "sub": _op_sub,
    "mul": _op_mul,
    "div": _op_div,
    "relu": _op_relu,
    "exp": _op_exp,
    "log": _op_log,
    "pow": _op_pow,
    "sum_reduce": _op_sum_reduce,
    "mean_reduce": _op_mean_reduce,
    "max_reduce": _op_max_reduce,
    "concat": _op_concat,
    "slice": _op_slice,
    "broadcast": _op_broadcast,
    # helpers beyond the core kernel set
    "neg": _op_neg,
    "softplus": _op_softplus,
    "reshape": _op_reshape,
    "scatter": _op_scatter,
}

OP_KINDS = tuple(_OPS)


def forward_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply op ``kind`` to ``inputs`` and record it if a tape is active."""
    try:
        impl = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {OP_KINDS}") from None
    tensors = tuple(_as_tensor(x) for x in inputs)
    # overflow surfaces as NonFiniteError below rather than as a numpy warning
    with np.errstate(over="ignore", invalid="ignore"):
        out, vjp = impl(*(t.data for t in tensors), **attrs)
    out = np.asarray(out, dtype=np.float64)
    _check_finite(out, kind)
    tape = current_tape()
    track = tape is not None and any(t.requires_grad for t in tensors)
    result = Tensor._wrap(out, requires_grad=track)
    if track:
        tape._record(Node(kind, tensors, result, vjp))
    return result


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    return forward_op("concat", tensors, axis=axis)


def broadcast(x, shape) -> Tensor:
    return forward_op("broadcast", (x,), shape=tuple(shape))


def scatter(x, shape, key) -> Tensor:
    return forward_op("scatter", (x,), shape=tuple(shape), key=key)


def softplus(x) -> Tensor:
    return forward_op("softplus", (x,))


# ---------------------------------------------------------------------------
# Backward pass and oracles
# ---------------------------------------------------------------------------


def backward(output: Tensor, tape: Tape) -> None:
    """Fill ``.grad`` of every leaf tensor that requires grad.

    Gradients accumulate into existing ``.grad`` arrays, so callers zero them
    between optimisation steps. The tape is consumed.
    """
    if tape.consumed:
        raise TapeConsumedError("backward() already ran on this tape; call reset() first")
    if output.size != 1:
        raise ShapeError(f"backward() needs a scalar output, got shape {output.shape}")
    tape.consumed = True
    seed = np.ones_like(output.data)
    produced = {id(n.output) for n in tape.nodes}
    if id(output) not in produced:
        if output.requires_grad:
            _accumulate_leaf(output, seed)
            return
        raise AutodiffError("output was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(output): seed}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        needs = [t.requires_grad for t in node.inputs]
        for t, gi in zip(node.inputs, node.vjp(g, needs)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key not in produced:
                leaves[key] = t
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    for key, t in leaves.items():
        _accumulate_leaf(t, grads[key])


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.array(g, dtype=np.float64).reshape(t.shape)
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _to_float(v) -> float:
    val = v.item() if isinstance(v, Tensor) else float(v)
    if not np.isfinite(val):
        raise NonFiniteError("finite-difference evaluation produced a non-finite value")
    return val


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, step: float = 1e-6) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.empty(base.size)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = _to_float(f(Tensor._wrap(base.copy())))
        flat[i] = orig - step
        fm = _to_float(f(Tensor._wrap(base.copy())))
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * step)
    return Tensor._wrap(grad.reshape(base.shape))


def jacobian(f: Callable[[Tensor], Tensor], x) -> np.ndarray:
    """Dense Jacobian of a 1-D-to-1-D map, one reverse sweep per output."""
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    y0 = f(Tensor._wrap(x0.copy())).data.reshape(-1)
    jac = np.empty((y0.size, x0.size))
    for i in range(y0.size):
        xt = Tensor(x0, requires_grad=True)
        with Tape() as tape:
            y = f(xt).reshape(-1)
            yi = y[i]
        backward(yi, tape)
        jac[i] = xt.grad.reshape(-1) if xt.grad is not None else 0.0
    return jac
