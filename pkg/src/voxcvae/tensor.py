"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record a :class:`Node` linking the output to its inputs together with
a closure computing the vector-Jacobian product. :func:`backward` orders the
recorded nodes topologically (the tape) and walks them once in reverse.

Arrays are float32 by default; an op keeps the dtype of its inputs, so a graph
built from float64 tensors is evaluated in float64 end to end.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    """One tape record: the op that produced a tensor and how to differentiate it."""

    __slots__ = ("op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn

    def __repr__(self) -> str:
        return f"Node({self.op})"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > 0 and min(arr.shape) == 0 and arr.size != 0:
            raise ValueError(f"invalid tensor shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic sugar; all routes end in ewise()
    def __add__(self, other):
        return ewise("add", self, other)

    def __radd__(self, other):
        return ewise("add", self, other)

    def __sub__(self, other):
        return ewise("sub", self, other)

    def __rsub__(self, other):
        return ewise("add", ewise("mul", self, -1.0), other)

    def __mul__(self, other):
        return ewise("mul", self, other)

    def __rmul__(self, other):
        return ewise("mul", self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return ewise("mul", self, 1.0 / float(other))

    def __neg__(self):
        return ewise("mul", self, -1.0)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], op: str, backward_fn: Callable) -> Tensor:
    """Wrap ``data`` and record a node if any input carries gradients.

    ``backward_fn(grad_out)`` returns one gradient array (or None) per input.
    """
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

_UNARY = ("exp", "log", "square", "sigmoid")
_BINARY = ("add", "sub", "mul")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to keep exp() from overflowing
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def ewise(op_kind: str, a: Tensor, b=None) -> Tensor:
    """Elementwise ``add, sub, mul`` (tensor or scalar ``b``) and ``exp, log, square, sigmoid``."""
    a = as_tensor(a)
    if op_kind in _UNARY:
        if b is not None:
            raise ValueError(f"{op_kind} is unary")
        x = a.data
        if op_kind == "exp":
            y = np.exp(x)
            return make_result(y, (a,), "exp", lambda g: (g * y,))
        if op_kind == "log":
            y = np.log(x)
            return make_result(y, (a,), "log", lambda g: (g / x,))
        if op_kind == "square":
            return make_result(x * x, (a,), "square", lambda g: (2.0 * g * x,))
        y = _sigmoid(x)
        return make_result(y, (a,), "sigmoid", lambda g: (g * y * (1.0 - y),))

    if op_kind not in _BINARY:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    if b is None:
        raise ValueError(f"{op_kind} needs two operands")

    if not isinstance(b, Tensor):
        s = float(b)
        x = a.data
        if op_kind == "add":
            return make_result(x + x.dtype.type(s), (a,), "add", lambda g: (g,))
        if op_kind == "sub":
            return make_result(x - x.dtype.type(s), (a,), "sub", lambda g: (g,))
        if s == 1.0:
            # keep x*1 bitwise equal to x
            return make_result(x.copy(), (a,), "mul", lambda g: (g,))
        return make_result(x * x.dtype.type(s), (a,), "mul", lambda g: (g * x.dtype.type(s),))

    if a.shape != b.shape:
        if b.size == 1 and b.ndim <= 1:
            return _scalar_tensor_op(op_kind, a, b)
        raise ValueError(f"shape mismatch in {op_kind}: {a.shape} vs {b.shape}")
    x, y = a.data, b.data
    if op_kind == "add":
        return make_result(x + y, (a, b), "add", lambda g: (g, g))
    if op_kind == "sub":
        return make_result(x - y, (a, b), "sub", lambda g: (g, -g))
    return make_result(x * y, (a, b), "mul", lambda g: (g * y, g * x))


def _scalar_tensor_op(op_kind: str, a: Tensor, b: Tensor) -> Tensor:
    x, s = a.data, b.data.reshape(())
    bshape = b.shape

    def red(g):
        return np.asarray(g.sum(), dtype=g.dtype).reshape(bshape)

    if op_kind == "add":
        return make_result(x + s, (a, b), "add", lambda g: (g, red(g)))
    if op_kind == "sub":
        return make_result(x - s, (a, b), "sub", lambda g: (g, -red(g)))
    return make_result(x * s, (a, b), "mul", lambda g: (g * s, red(g * x)))


def exp(a: Tensor) -> Tensor:
    return ewise("exp", a)


def log(a: Tensor) -> Tensor:
    return ewise("log", a)


def square(a: Tensor) -> Tensor:
    return ewise("square", a)


def sigmoid(a: Tensor) -> Tensor:
    return ewise("sigmoid", a)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(a: Tensor, axis=None) -> Tensor:
    x = a.data
    y = np.asarray(x.sum(axis=axis), dtype=x.dtype)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(x.dtype),)

    return make_result(y, (a,), "sum", bw)


def tmean(a: Tensor, axis=None) -> Tensor:
    x = a.data
    n = x.size if axis is None else int(np.prod([x.shape[i] for i in np.atleast_1d(axis)]))
    y = np.asarray(x.mean(axis=axis), dtype=x.dtype)

    def bw(g):
        g = g / x.dtype.type(n)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return make_result(y, (a,), "mean", bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    src = a.shape
    y = a.data.reshape(shape)
    return make_result(y, (a,), "reshape", lambda g: (g.reshape(src),))


def take(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; backward scatters into a zero array."""
    y = a.data[index]
    src = a.shape

    def bw(g):
        out = np.zeros(src, dtype=g.dtype)
        out[index] = g
        return (out,)

    return make_result(np.array(y, copy=True), (a,), "take", bw)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along ``axis``; all other extents must agree."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat needs at least one tensor")
    ndim = parts[0].ndim
    ax = axis % ndim
    for p in parts[1:]:
        if p.ndim != ndim or any(p.shape[i] != parts[0].shape[i] for i in range(ndim) if i != ax):
            raise ValueError(
                f"concat extents disagree off axis {axis}: {[q.shape for q in parts]}"
            )
    if len(parts) == 1:
        return parts[0]
    y = np.concatenate([p.data for p in parts], axis=ax)
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_result(y, parts, "concat", bw)


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    return concat([reshape(p, (1,) + p.shape) for p in parts], axis=0)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def build_tape(loss: Tensor) -> list[Tensor]:
    """Tensors reachable from ``loss`` in topological order (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor, wrt=None, accumulate: bool = False) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a mapping from leaf tensors to gradients. Without ``wrt`` it holds
    every reachable leaf with ``requires_grad``; with ``wrt`` it holds exactly
    those tensors, unreachable ones mapped to zeros. Leaf ``.grad`` fields are
    set, or added to when ``accumulate`` is true. The recorded graph is left
    intact, so backward may be called again on the same loss.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return _fill_missing({}, wrt)
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    leaves: dict[Tensor, np.ndarray] = {}
    for t in reversed(tape):
        g = grads.pop(id(t), None)
        if g is None:
            g = np.zeros(t.shape, dtype=t.dtype)
        if t.node is None:
            leaves[t] = g
            continue
        in_grads = t.node.backward_fn(g)
        for inp, ig in zip(t.node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = np.asarray(ig, dtype=inp.dtype)
    for leaf, g in leaves.items():
        if accumulate and leaf.grad is not None:
            leaf.grad = leaf.grad + g
        else:
            leaf.grad = g
    return _fill_missing(leaves, wrt)


def _fill_missing(leaves: dict, wrt) -> dict:
    if wrt is None:
        return leaves
    return {t: leaves[t] if t in leaves else np.zeros(t.shape, dtype=t.dtype) for t in wrt}


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None
