"""Reverse-mode automatic differentiation over dense float64 arrays.

Nodes are recorded on a :class:`Tape` in creation order, which is already a
topological order, so :func:`backward` is a single reverse sweep over the tape.
A tape is meant to live for one training iteration; :meth:`Tape.clear` bumps the
generation counter and every node created before it becomes stale.

Example::

    tape = Tape()
    w = tape.leaf([3.0])
    loss = ad.sum(w * w)
    backward(loss)
    w.grad  # array([6.])
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Tuple

import numpy as np

LOG_EPS = 1e-12


class AutodiffError(Exception):
    """Base class for graph construction and differentiation errors."""


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, *shapes: Tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class NonFiniteError(AutodiffError, FloatingPointError):
    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"{op}: produced non-finite values"
        super().__init__(f"{msg} ({detail})" if detail else msg)


class StaleTapeError(AutodiffError):
    pass


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered record of nodes for one computation."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.generation = 0

    def clear(self) -> None:
        self.nodes = []
        self.generation += 1

    def leaf(self, value, requires_grad: bool = True) -> "Node":
        return Node(self, _as_array(value), (), None, requires_grad, "leaf")

    def constant(self, value) -> "Node":
        return Node(self, _as_array(value), (), None, False, "constant")

    def __len__(self) -> int:
        return len(self.nodes)


class Node:
    __slots__ = ("tape", "generation", "index", "value", "grad", "parents",
                 "_backward", "requires_grad", "kind")

    def __init__(self, tape: Tape, value: np.ndarray, parents: Tuple["Node", ...],
                 backward_fn: Optional[BackwardFn], requires_grad: bool, kind: str):
        self.tape = tape
        self.generation = tape.generation
        self.index = len(tape.nodes)
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.parents = parents
        self._backward = backward_fn
        self.requires_grad = requires_grad
        self.kind = kind
        tape.nodes.append(self)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def adjoint(self) -> np.ndarray:
        """Adjoint of this node from the last backward pass (zeros if unreached)."""
        if self.grad is None:
            return np.zeros_like(self.value)
        return self.grad

    def __repr__(self) -> str:
        return f"Node(kind={self.kind}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64)


def _tape_of(*items) -> Tape:
    tape = None
    for item in items:
        if isinstance(item, Node):
            if tape is None:
                tape = item.tape
            elif item.tape is not tape:
                raise AutodiffError("operands live on different tapes")
            if item.generation != item.tape.generation:
                raise StaleTapeError(f"node from tape generation {item.generation} used "
                                     f"after clear (current {item.tape.generation})")
    if tape is None:
        raise AutodiffError("at least one operand must be a Node")
    return tape


def _lift(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.constant(x)


def _make(op: str, value: np.ndarray, parents: Tuple[Node, ...], backward_fn: BackwardFn) -> Node:
    _tape_of(*parents)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op)
    requires_grad = any(p.requires_grad for p in parents)
    return Node(parents[0].tape, value, parents, backward_fn, requires_grad, op)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    # Only scalar operands are broadcast in elementwise ops.
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def _elementwise_operands(op: str, a, b) -> Tuple[Node, Node]:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    # only size-1 operands broadcast
    if a.shape != b.shape and a.value.size != 1 and b.value.size != 1:
        raise ShapeError(op, a.shape, b.shape)
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Node:
    a, b = _elementwise_operands("add", a, b)
    out = a.value + b.value
    return _make("add", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    a, b = _elementwise_operands("sub", a, b)
    out = a.value - b.value
    return _make("sub", out, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Node:
    a, b = _elementwise_operands("mul", a, b)
    av, bv = a.value, b.value
    out = av * bv
    return _make("mul", out, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def div(a, b) -> Node:
    """Elementwise a / b with the denominator magnitude clamped at ``LOG_EPS``."""
    a, b = _elementwise_operands("div", a, b)
    bv = b.value
    small = np.abs(bv) < LOG_EPS
    denom = np.where(small, np.where(bv < 0, -LOG_EPS, LOG_EPS), bv)
    out = a.value / denom

    def backward_fn(g):
        ga = g / denom
        gb = np.where(small, 0.0, -g * out / denom)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("div", out, (a, b), backward_fn)


def pow_scalar(a: Node, p: float) -> Node:
    av = a.value
    out = np.power(av, p)
    return _make("pow_scalar", out, (a,), lambda g: (g * p * np.power(av, p - 1.0),))


def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Node) -> Node:
    """Natural log of ``max(a, LOG_EPS)``; the clamp realizes 0 log 0 = 0."""
    av = a.value
    clamped = np.maximum(av, LOG_EPS)
    out = np.log(clamped)
    return _make("log", out, (a,), lambda g: (np.where(av >= LOG_EPS, g / clamped, 0.0),))


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------- reductions

def _check_axis(op: str, a: Node, axis: Optional[int]) -> None:
    if axis is not None and not (0 <= axis < a.value.ndim):
        raise ShapeError(op, a.shape)


def sum(a: Node, axis: Optional[int] = None) -> Node:  # noqa: A001
    _check_axis("sum", a, axis)
    shape = a.shape
    out = np.asarray(a.value.sum(axis=axis))

    def backward_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", out, (a,), backward_fn)


def mean(a: Node, axis: Optional[int] = None) -> Node:
    _check_axis("mean", a, axis)
    shape = a.shape
    count = a.value.size if axis is None else shape[axis]
    if count == 0:
        raise ShapeError("mean", shape)
    out = np.asarray(a.value.mean(axis=axis))

    def backward_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make("mean", out, (a,), backward_fn)


def softmax_rows(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError("softmax_rows", a.shape)
    z = a.value - a.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make("softmax_rows", out, (a,), backward_fn)


def max_rows(a: Node) -> Node:
    """Row maxima; the gradient goes to the lowest index attaining each max."""
    if a.value.ndim != 2 or a.shape[1] == 0:
        raise ShapeError("max_rows", a.shape)
    idx = np.argmax(a.value, axis=1)
    rows = np.arange(a.shape[0])
    out = a.value[rows, idx]

    def backward_fn(g):
        ga = np.zeros_like(a.value)
        ga[rows, idx] = g
        return (ga,)

    return _make("max_rows", out, (a,), backward_fn)


# ---------------------------------------------------------------- shape ops

def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    av, bv = a.value, b.value
    with np.errstate(over="ignore", invalid="ignore"):
        out = av @ bv
    return _make("matmul", out, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _make("transpose", a.value.T.copy(), (a,), lambda g: (g.T,))


def broadcast_row(v: Node, n: int) -> Node:
    """Stack a length-m vector into an n x m matrix."""
    if v.value.ndim != 1 or n < 1:
        raise ShapeError("broadcast_row", v.shape, (n,))
    out = np.broadcast_to(v.value, (n, v.shape[0])).copy()
    return _make("broadcast_row", out, (v,), lambda g: (g.sum(axis=0),))


def stop_gradient(a: Node) -> Node:
    """Constant copy of ``a``: same value, no path back to its inputs."""
    _tape_of(a)
    return a.tape.constant(a.value.copy())


_FORWARD_OPS = {
    "matmul": matmul, "add": add, "sub": sub, "mul": mul, "div": div,
    "pow_scalar": pow_scalar, "exp": exp, "log": log, "tanh": tanh,
    "sum": sum, "mean": mean, "softmax_rows": softmax_rows, "max_rows": max_rows,
    "broadcast_row": broadcast_row, "transpose": transpose,
}


def forward_op(kind: str, *inputs, **kwargs) -> Node:
    """Dispatch an op by name, e.g. ``forward_op("pow_scalar", x, 2.0)``."""
    try:
        fn = _FORWARD_OPS[kind]
    except KeyError:
        raise AutodiffError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- backward

def backward(root: Node) -> None:
    """Fill ``grad`` on every node of root's tape with d(root)/d(node).

    Adjoints from any previous pass on the same tape are discarded first.
    """
    if root.value.size != 1:
        raise AutodiffError(f"backward needs a scalar root, got shape {root.shape}")
    tape = root.tape
    if root.generation != tape.generation:
        raise StaleTapeError(f"root belongs to generation {root.generation}, "
                             f"tape is at {tape.generation}")
    nodes = tape.nodes
    for node in nodes:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(nodes[: root.index + 1]):
        g = node.grad
        if g is None or node._backward is None or not node.requires_grad:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(pg, dtype=np.float64).reshape(parent.shape)
            else:
                parent.grad = parent.grad + pg


def finite_difference_gradient(loss_fn: Callable, params, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar ``loss_fn`` at ``params``.

    ``params`` is either a float array or a parameter collection exposing
    ``to_vector()`` / ``from_vector(vec)``. The result is a flat vector in the
    same coordinate order.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(params, np.ndarray):
        shape = params.shape
        flat = params.astype(np.float64).ravel()
        rebuild = lambda v: v.reshape(shape)  # noqa: E731
    else:
        flat = params.to_vector()
        rebuild = params.from_vector
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += step
        minus[i] -= step
        lp = float(loss_fn(rebuild(plus)))
        lm = float(loss_fn(rebuild(minus)))
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NonFiniteError("finite_difference_gradient", f"coordinate {i}")
        grad[i] = (lp - lm) / (2.0 * step)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-7) -> float:
    """Largest per-coordinate |a - b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
