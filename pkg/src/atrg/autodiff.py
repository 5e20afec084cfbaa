"""Reverse-mode automatic differentiation over dense float64 arrays.

Every vector-Jacobian product is written in terms of :class:`Tensor`
operations, so a gradient computed with ``create_graph=True`` is itself a
graph node and can be differentiated again (reverse-over-reverse).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NumericError",
    "ShapeError",
    "no_grad",
    "enable_grad",
    "grad_enabled",
    "grad",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "power",
    "relu",
    "tanh",
    "gelu",
    "abs_",
    "sum_",
    "mean",
    "reshape",
    "transpose",
    "broadcast_to",
    "sum_to",
    "concatenate",
    "take",
    "index",
    "softmax",
    "log_softmax",
    "layer_norm",
    "dropout",
    "tile",
]


class NumericError(ArithmeticError):
    """A forward result contained NaN/Inf, or a domain error occurred."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


# per thread, so decoding threads cannot clobber each other's grad mode
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def _grad_mode(flag: bool):
    prev = grad_enabled()
    _state.enabled = flag
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Disable graph recording inside the block (for the calling thread)."""
    return _grad_mode(False)


def enable_grad():
    """Record graphs inside the block even under an outer :func:`no_grad`."""
    return _grad_mode(True)


class Tensor:
    """A node in a differentiable computation graph.

    Leaves have no parents. A non-leaf holds the name of the operation
    that produced it, its parents, and a closure mapping the upstream
    gradient to one gradient per parent.
    """

    __slots__ = ("data", "requires_grad", "op", "parents", "_vjp", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite value in tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

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
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite result in {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = None
    out.parents = ()
    out._vjp = None
    out.requires_grad = False
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = tuple(parents)
        out._vjp = vjp
    return out


def _broadcast_shape(*shapes) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast shapes {shapes}") from exc


# ---------------------------------------------------------------- structural


def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    data = data.reshape(shape)
    in_shape = x.shape
    return _make(data, "sum_to", (x,), lambda g, n: (broadcast_to(g, in_shape),))


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from exc
    in_shape = x.shape
    return _make(data, "broadcast_to", (x,), lambda g, n: (sum_to(g, in_shape),))


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    in_shape = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {in_shape} to {shape}") from exc
    return _make(data, "reshape", (x,), lambda g, n: (reshape(g, in_shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), "transpose", (x,), lambda g, n: (transpose(g, inv),))


def concatenate(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[x.shape for x in xs]}") from exc
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def vjp(g, n):
        out = []
        for need, lo, hi in zip(n, bounds[:-1], bounds[1:]):
            if not need:
                out.append(None)
                continue
            key = [slice(None)] * g.ndim
            key[ax] = slice(int(lo), int(hi))
            out.append(index(g, tuple(key)))
        return tuple(out)

    return _make(data, "concatenate", xs, vjp)


def tile(x: Tensor, reps: int, axis: int = 0) -> Tensor:
    """Stack ``reps`` copies of ``x`` along a new leading block of ``axis``."""
    return concatenate([x] * reps, axis=axis)


def _scatter(g: Tensor, key, shape: tuple[int, ...]) -> Tensor:
    """Adjoint of ``index``: place ``g`` into zeros of ``shape`` at ``key``."""
    data = np.zeros(shape)
    np.add.at(data, key, g.data)
    return _make(data, "scatter", (g,), lambda gg, n: (index(gg, key),))


def index(x: Tensor, key) -> Tensor:
    x = as_tensor(x)
    if isinstance(key, Tensor):
        raise TypeError("index keys must be numpy/int, not Tensor")
    shape = x.shape
    return _make(np.asarray(x.data[key]), "index", (x,), lambda g, n: (_scatter(g, key, shape),))


def take(table: Tensor, ids) -> Tensor:
    """Embedding lookup: rows of ``table`` selected by integer ``ids``."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token index out of range [0, {table.shape[0]})")
    return index(table, ids)


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b), lambda g, n: (sum_to(g, sa) if n[0] else None, sum_to(g, sb) if n[1] else None))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b), lambda g, n: (sum_to(g, sa) if n[0] else None, sum_to(neg(g), sb) if n[1] else None))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g, n: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make(
        a.data * b.data,
        "mul",
        (a, b),
        lambda g, n: (sum_to(mul(g, b), sa) if n[0] else None, sum_to(mul(g, a), sb) if n[1] else None),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    if np.any(b.data == 0):
        raise NumericError("division by zero")
    sa, sb = a.shape, b.shape

    def vjp(g, n):
        ga = div(g, b)
        return (sum_to(ga, sa) if n[0] else None), (sum_to(neg(mul(ga, div(a, b))), sb) if n[1] else None)

    return _make(a.data / b.data, "div", (a, b), vjp)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])
    sa, sb = a.shape, b.shape

    def vjp(g, n):
        ga = sum_to(matmul(g, swap_last(b)), sa) if n[0] else None
        gb = sum_to(matmul(swap_last(a), g), sb) if n[1] else None
        return ga, gb

    return _make(a.data @ b.data, "matmul", (a, b), vjp)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    out = None

    def vjp(g, n):
        return (mul(g, out),)

    out = _make(data, "exp", (a,), vjp)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("logarithm of non-positive value")
    return _make(np.log(a.data), "log", (a,), lambda g, n: (div(g, a),))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    if p != int(p) and np.any(a.data < 0):
        raise NumericError("fractional power of negative value")
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data**p
    return _make(data, "power", (a,), lambda g, n: (mul(g, mul(power(a, p - 1), p)),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _make(a.data * mask, "relu", (a,), lambda g, n: (mul(g, mask),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def vjp(g, n):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _make(np.tanh(a.data), "tanh", (a,), vjp)
    return out


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a) -> Tensor:
    """Tanh approximation of GELU, composed so it stays twice differentiable."""
    a = as_tensor(a)
    inner = mul(add(a, mul(mul(mul(a, a), a), 0.044715)), _GELU_C)
    return mul(mul(a, 0.5), add(tanh(inner), 1.0))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), "abs", (a,), lambda g, n: (mul(g, sign),))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    in_shape = a.shape
    data = a.data.sum(axis=axis, keepdims=True)
    kept = data.shape

    def vjp(g, n):
        return (broadcast_to(reshape(g, kept), in_shape),)

    if not keepdims:
        data = data.reshape(()) if axis is None else np.squeeze(data, axis=axis)
    return _make(np.asarray(data), "sum", (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------- composite NN ops


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)
    out = None

    def vjp(g, n):
        gy = mul(g, out)
        return (sub(gy, mul(out, sum_(gy, axis, keepdims=True))),)

    out = _make(data, "softmax", (a,), vjp)
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    out = None

    def vjp(g, n):
        return (sub(g, mul(exp(out), sum_(g, axis, keepdims=True))),)

    out = _make(a.data - lse, "log_softmax", (a,), vjp)
    return out


def layer_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; built from primitives so it is twice differentiable."""
    x = as_tensor(x)
    mu = mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    y = mul(xc, power(add(var, eps), -0.5))
    if weight is not None:
        y = mul(y, weight)
    if bias is not None:
        y = add(y, bias)
    return y


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity outside training."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return mul(x, keep)


# ---------------------------------------------------------------- backward


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    output: Tensor,
    inputs: Iterable[Tensor],
    create_graph: bool = False,
    grad_output: Tensor | None = None,
) -> list[Tensor]:
    """Gradients of the scalar ``output`` with respect to each of ``inputs``.

    Any node of the graph may be requested, not only leaves. Unreachable
    inputs receive zeros of matching shape. With ``create_graph`` the
    returned tensors are differentiable functions of the graph's leaves.
    """
    inputs = list(inputs)
    if grad_output is None:
        if output.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
        grad_output = Tensor(np.ones(output.shape))
    wanted = {id(t) for t in inputs}
    order = _toposort(output)
    # only nodes with a path down to a requested input need gradients
    leads: set[int] = set()
    for node in order:
        if id(node) in wanted or any(id(p) in leads for p in node.parents):
            leads.add(id(node))
    grads: dict[int, Tensor] = {id(output): grad_output}
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for node in reversed(order):
            g = grads.get(id(node))
            if g is None or node._vjp is None or id(node) not in leads:
                continue
            if g.shape != node.shape:
                raise ShapeError(
                    f"gradient shape {g.shape} inconsistent with node {node.op} shape {node.shape}"
                )
            if id(node) not in wanted:
                # free intermediate buffers as soon as they are consumed
                del grads[id(node)]
            needs = tuple(p.requires_grad and id(p) in leads for p in node.parents)
            for parent, need, pg in zip(node.parents, needs, node._vjp(g, needs)):
                if not need:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else add(prev, pg)
    out = []
    for t in inputs:
        g = grads.get(id(t))
        out.append(Tensor(np.zeros(t.shape)) if g is None else g)
    return out
