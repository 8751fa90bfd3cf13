"""Minimal reverse-mode differentiation over dense numpy arrays.

Every differentiable value in the package is a :class:`Tensor`.  Operations
append nodes in creation order; :func:`backward` replays that order in reverse,
so gradient accumulation for shared nodes is a deterministic sum.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_SEQ = itertools.count()

PRIMITIVES = (
    "add", "sub", "mul", "div", "neg", "matmul", "sum", "mean", "broadcast",
    "reshape", "concat", "slice", "relu", "tanh", "sin", "cos", "exp", "log",
    "sqrt", "square", "l2norm", "softmax", "mse", "clamp", "detach",
)


class AutodiffError(Exception):
    """Base class for errors raised by the differentiation engine."""


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        desc = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class DomainError(AutodiffError, ValueError):
    def __init__(self, op: str, detail: str):
        self.op = op
        super().__init__(f"{op}: {detail}")


class Tensor:
    """An n-dimensional float array that can take part in gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward", "seq")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.seq = next(_SEQ)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return slice_(self, idx)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def detach(self): return detach(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _result_dtype(*ts: Tensor):
    return np.result_type(*(t.data for t in ts))


def _make(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_pair(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise binary

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_pair("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_pair("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_pair("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_pair("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, "div", (a, b), bw)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


# ---------------------------------------------------------------- linear algebra / shape

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def bw(g):
        A, B = a.data, b.data
        if A.ndim == 1 and B.ndim == 1:
            return g * B, g * A
        if A.ndim == 1:
            return g @ np.swapaxes(B, -1, -2), _unbroadcast(np.multiply.outer(A, g), B.shape)
        if B.ndim == 1:
            gb = np.tensordot(g, A, axes=(list(range(g.ndim)), list(range(g.ndim))))
            return np.multiply.outer(g, B), gb
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

    return _make(a.data @ b.data, "matmul", (a, b), bw)


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), "sum", (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _axes(axis, a.ndim)
    count = math.prod(a.shape[i] for i in axes) if axes else 1

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype),)

    return _make(np.mean(a.data, axis=axes, keepdims=keepdims), "mean", (a,), bw)


def broadcast(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast", a.shape, shape) from None
    return _make(out, "broadcast", (a,), lambda g: (_unbroadcast(g, a.shape),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(out, "concat", tuple(ts), bw)


def slice_(a: Tensor, idx) -> Tensor:
    try:
        out = a.data[idx]
    except IndexError:
        raise ShapeError("slice", a.shape, (str(idx),)) from None

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), "slice", (a,), bw)


# ---------------------------------------------------------------- elementwise unary

def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(a.dtype), "relu", (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1 - out * out),))


def sin(a: Tensor) -> Tensor:
    return _make(np.sin(a.data), "sin", (a,), lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    return _make(np.cos(a.data), "cos", (a,), lambda g: (-g * np.sin(a.data),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("log", f"negative input (min {a.data.min():.3g})")
    with np.errstate(divide="ignore"):
        out = np.log(a.data)
    return _make(out, "log", (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt", f"negative input (min {a.data.min():.3g})")
    out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g / (2 * out),))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, "square", (a,), lambda g: (2 * g * a.data,))


def l2norm(a: Tensor, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Euclidean norm along ``axis``."""
    out = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1)
        return (g * a.data / safe,)

    return _make(out if keepdims else np.squeeze(out, axis), "l2norm", (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, "softmax", (a,), bw)


def mse(a, b) -> Tensor:
    """Mean of squared differences over every element."""
    a, b = _pair(a, b)
    if a.shape != b.shape:
        raise ShapeError("mse", a.shape, b.shape)
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        ga = (2.0 / n) * g * diff
        return ga.astype(a.dtype), (-ga).astype(b.dtype)

    return _make(np.asarray(np.mean(diff * diff)), "mse", (a, b), bw)


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(a.data, lo, hi)
    mask = np.ones(a.shape, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi
    return _make(out.astype(a.dtype), "clamp", (a,), lambda g: (g * mask,))


def detach(a: Tensor) -> Tensor:
    """Forward identity with no gradient edge back to ``a``."""
    out = Tensor(a.data.copy())
    out.op = "detach"
    return out


_DISPATCH = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "matmul": matmul,
    "sum": sum_, "mean": mean, "broadcast": broadcast, "reshape": reshape,
    "concat": lambda *ts, **kw: concat(ts, **kw), "slice": slice_, "relu": relu,
    "tanh": tanh, "sin": sin, "cos": cos, "exp": exp, "log": log, "sqrt": sqrt,
    "square": square, "l2norm": l2norm, "softmax": softmax, "mse": mse,
    "clamp": clamp, "detach": detach,
}


def apply_primitive(op: str, *inputs, **attrs) -> Tensor:
    """Apply a catalog primitive by tag, e.g. ``apply_primitive("mul", x, x)``."""
    try:
        fn = _DISPATCH[op]
    except KeyError:
        raise AutodiffError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- graph + backward

@dataclass
class GradGraph:
    """Nodes reachable from an output, in append (creation) order."""

    nodes: list[Tensor]

    @classmethod
    def from_output(cls, output: Tensor) -> "GradGraph":
        seen: dict[int, Tensor] = {}
        stack = [output]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen[id(t)] = t
            stack.extend(p for p in t.parents if p.requires_grad)
        return cls(sorted(seen.values(), key=lambda t: t.seq))

    def __contains__(self, t: Tensor) -> bool:
        return any(n is t for n in self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


def backward(output: Tensor, graph: GradGraph | None = None, free: bool = True) -> dict[int, np.ndarray]:
    """Reverse-mode pass from a scalar ``output``.

    Returns a map from ``id(tensor)`` to gradient for every node that received
    one, and stores leaf gradients on ``.grad`` (accumulating).  With ``free``
    the backward closures of interior nodes are dropped afterwards.
    """
    if output.data.size != 1:
        raise AutodiffError(f"backward needs a scalar output, got shape {output.shape}")
    if graph is None:
        graph = GradGraph.from_output(output)
    elif output not in graph:
        raise AutodiffError("output is not on the given graph")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(graph.nodes):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    for node in graph.nodes:
        if node.is_leaf and id(node) in grads:
            g = grads[id(node)].astype(node.dtype, copy=False)
            node.grad = g if node.grad is None else node.grad + g
    if free:
        for node in graph.nodes:
            if not node.is_leaf:
                node._backward = None
                node.parents = ()
    return grads


def grad(output: Tensor, inputs: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``output`` w.r.t. ``inputs`` (zeros where unreachable)."""
    grads = backward(output)
    return [grads.get(id(t), np.zeros_like(t.data)) for t in inputs]


def finite_diff_check(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences of ``f`` at ``x``.

    ``f`` maps a Tensor to a scalar Tensor.  Evaluation is done in float64.
    """
    x = np.array(x, dtype=np.float64)
    xt = Tensor(x, requires_grad=True)
    out = f(xt)
    if not np.all(np.isfinite(out.data)):
        raise AutodiffError("non-finite value at the base point")
    (analytic,) = grad(out, [xt])
    central = np.empty_like(x)
    flat = x.reshape(-1)
    cflat = central.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x)).data)
        flat[i] = orig - h
        fm = float(f(Tensor(x)).data)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise AutodiffError(f"non-finite value at index {i}")
        cflat[i] = (fp - fm) / (2 * h)
    return float(np.max(np.abs(analytic - central) / (np.abs(central) + 1e-8))) if x.size else 0.0
