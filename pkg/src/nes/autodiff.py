"""Small reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records every operation whose inputs require gradients while
it is active. Outside a tape the same functions run on plain arrays and
return plain arrays, so inference code pays no bookkeeping cost.

    >>> p = Var(np.array(3.0), name="p")
    >>> with Tape() as tape:
    ...     loss = p * p
    >>> tape.backward(loss)[p]
    array(6.)
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Var",
    "Tape",
    "TapeError",
    "value",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "matmul",
    "dense",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "sigmoid",
    "softplus",
    "total",
    "mean",
    "cumsum",
    "reshape",
    "take",
    "concat",
    "stack",
    "custom",
]


class TapeError(RuntimeError):
    """Raised when a tape is used incorrectly (e.g. backward from a foreign node)."""


class Var:
    """A node in the computation graph.

    Leaves created by the user (parameters) have no parents. Interior nodes
    are only ever created by the op functions in this module while a tape is
    active.
    """

    __slots__ = ("value", "parents", "vjp", "name", "requires_grad", "tape", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, name: str | None = None, requires_grad: bool = True):
        self.value = _as_float(data)
        self.parents: tuple[Var, ...] = ()
        self.vjp: Callable | None = None
        self.name = name
        self.requires_grad = requires_grad
        self.tape: Tape | None = None

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.value.shape})"

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __neg__ = lambda a: neg(a)
    __matmul__ = lambda a, b: matmul(a, b)
    __rmatmul__ = lambda a, b: matmul(b, a)
    __pow__ = lambda a, k: power(a, k)
    __getitem__ = lambda a, idx: take(a, idx)


_local = threading.local()


def _active() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Records operations for one backward pass.

    A tape is single-use per thread and holds nodes in creation order, which
    is already a topological order; backward walks it in reverse.
    """

    def __init__(self):
        self.nodes: list[Var] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, node: Var) -> Var:
        node.tape = self
        self.nodes.append(node)
        return node

    def backward(self, loss: Var, wrt: Iterable[Var] | None = None) -> dict[Var, np.ndarray]:
        """Return d(loss)/d(leaf) for every leaf reached (or for ``wrt``)."""
        if not isinstance(loss, Var) or loss.tape is not self:
            raise TapeError("loss was not produced by an operation recorded on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        leaves: dict[int, Var] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if parent.tape is not self:
                    leaves[key] = parent
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        out = {leaves[k]: g for k, g in grads.items() if k in leaves}
        if wrt is not None:
            out = {v: out.get(v, np.zeros_like(v.value)) for v in wrt}
        return out


def _as_float(x) -> np.ndarray:
    # float32 and float64 inputs keep their precision; anything else is promoted
    a = np.asarray(x)
    if a.dtype == np.float32 or a.dtype == np.float64:
        return a
    return a.astype(np.float64)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else _as_float(x)


def _operands(a, b):
    # a plain constant takes the dtype of the Var it is combined with, so
    # float32 graphs are not silently promoted by Python scalars
    if isinstance(a, Var) and not isinstance(b, Var):
        return a.value, np.asarray(b, dtype=a.value.dtype)
    if isinstance(b, Var) and not isinstance(a, Var):
        return np.asarray(a, dtype=b.value.dtype), b.value
    return value(a), value(b)


def _needs_graph(*xs) -> "Tape | None":
    tape = _active()
    if tape is None:
        return None
    for x in xs:
        if isinstance(x, Var) and x.requires_grad:
            return tape
    return None


def _node(tape: Tape, out: np.ndarray, parents: Sequence, vjp: Callable) -> Var:
    v = Var.__new__(Var)
    v.value = out
    v.name = None
    v.requires_grad = True
    v.parents = tuple(p if isinstance(p, Var) else _CONST for p in parents)
    v.vjp = vjp
    return tape.record(v)


_CONST = Var(0.0, name="const", requires_grad=False)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def custom(inputs: Sequence, out: np.ndarray, vjp: Callable) -> "Var | np.ndarray":
    """Wrap a precomputed forward value with a hand-written VJP.

    ``vjp(g)`` must return one gradient (or None) per entry of ``inputs``.
    """
    tape = _needs_graph(*inputs)
    if tape is None:
        return out
    return _node(tape, out, inputs, vjp)


def add(a, b):
    av, bv = _operands(a, b)
    out = av + bv
    tape = _needs_graph(a, b)
    if tape is None:
        return out
    return _node(tape, out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = _operands(a, b)
    out = av - bv
    tape = _needs_graph(a, b)
    if tape is None:
        return out
    return _node(tape, out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = _operands(a, b)
    out = av * bv
    tape = _needs_graph(a, b)
    if tape is None:
        return out
    return _node(
        tape, out, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))
    )


def div(a, b):
    av, bv = _operands(a, b)
    out = av / bv
    tape = _needs_graph(a, b)
    if tape is None:
        return out
    return _node(
        tape,
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def neg(a):
    out = -value(a)
    tape = _needs_graph(a)
    if tape is None:
        return out
    return _node(tape, out, (a,), lambda g: (-g,))


def power(a, k: float):
    av = value(a)
    out = av**k
    tape = _needs_graph(a)
    if tape is None:
        return out
    return _node(tape, out, (a,), lambda g: (g * k * av ** (k - 1),))


def matmul(a, b):
    av, bv = value(a), value(b)
    out = av @ bv
    tape = _needs_graph(a, b)
    if tape is None:
        return out

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2) if isinstance(a, Var) and a.requires_grad else None
        gb = None
        if isinstance(b, Var) and b.requires_grad:
            gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _node(tape, out, (a, b), vjp)


def dense(x, w, b):
    """``x @ w + b`` as one node (x: (N, I), w: (I, O), b: (O,))."""
    xv, wv, bv = value(x), value(w), value(b)
    out = xv @ wv
    out += bv
    tape = _needs_graph(x, w, b)
    if tape is None:
        return out

    def vjp(g):
        gx = g @ wv.T if isinstance(x, Var) and x.requires_grad else None
        return gx, xv.T @ g, g.sum(axis=0)

    return _node(tape, out, (x, w, b), vjp)


def exp(a):
    out = np.exp(value(a))
    tape = _needs_graph(a)
    if tape is None:
        return out
    return _node(tape, out, (a,), lambda g: (g * out,))


def log(a):
    av = value(a)
    out = np.log(av)
    tape = _needs_graph(a)
    if tape is None:
        return out
    return _node(tape, out, (a,), lambda g: (g / av,))


def sqrt(a):
    out = np.sqrt(value(a))
    tape = _needs_graph(a)
    if tape is None:
        return out
    return _node(tape, out, (a,), lambda g: (0.5 * g / out,))


def tanh(a):
    out = np.tanh(value(a))
    tape = _needs_graph(a)
    if tape is None:
        return out
    return _node(tape, out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form is overflow-free for any finite x
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    out = _sigmoid(value(a))
    tape = _needs_graph(a)
    if tape is None:
        return out
    return _node(tape, out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    av = value(a)
    out = np.logaddexp(0.0, av)
    tape = _needs_graph(a)
    if tape is None:
        return out
    return _node(tape, out, (a,), lambda g: (g * _sigmoid(av),))


def total(a, axis=None, keepdims: bool = False):
    av = value(a)
    out = av.sum(axis=axis, keepdims=keepdims)
    tape = _needs_graph(a)
    if tape is None:
        return out

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape),)

    return _node(tape, out, (a,), vjp)


def mean(a, axis=None):
    av = value(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(total(a, axis=axis), 1.0 / n)


def cumsum(a, axis: int = -1, exclusive: bool = False):
    av = value(a)
    out = np.cumsum(av, axis=axis)
    if exclusive:
        out = out - av
    tape = _needs_graph(a)
    if tape is None:
        return out

    def vjp(g):
        rev = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
        return (rev - g if exclusive else rev,)

    return _node(tape, out, (a,), vjp)


def reshape(a, shape):
    av = value(a)
    out = av.reshape(shape)
    tape = _needs_graph(a)
    if tape is None:
        return out
    return _node(tape, out, (a,), lambda g: (g.reshape(av.shape),))


def take(a, idx):
    av = value(a)
    out = av[idx]
    tape = _needs_graph(a)
    if tape is None:
        return out

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        return (full,)

    return _node(tape, out, (a,), vjp)


def concat(xs: Sequence, axis: int = -1):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    tape = _needs_graph(*xs)
    if tape is None:
        return out
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _node(tape, out, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(xs: Sequence, axis: int = -1):
    vals = [value(x) for x in xs]
    out = np.stack(vals, axis=axis)
    tape = _needs_graph(*xs)
    if tape is None:
        return out
    n = len(vals)
    return _node(
        tape,
        out,
        tuple(xs),
        lambda g: tuple(np.squeeze(p, axis=axis) for p in np.split(g, n, axis=axis)),
    )
