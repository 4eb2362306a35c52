"""Reverse-mode automatic differentiation over dense float64 matrices.

Values are plain 2-D ``numpy.ndarray`` objects of dtype float64. A :class:`Node`
wraps one value together with its gradient accumulator and the rules that
push an upstream gradient to its parents. Nodes created inside an active
:class:`Tape` are recorded in execution order, and :func:`backward` replays
that order in reverse.

Targets that must not receive gradient (sharpened pseudo-labels, smoothed
support labels) are passed around as raw arrays, never as nodes.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from deskpaws import kernels

NORM_EPS = 1e-12
LOG_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class DeterminismError(RuntimeError):
    pass


def as_matrix(x) -> np.ndarray:
    """Coerce ``x`` to a C-contiguous 2-D float64 array."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


_local = threading.local()


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Node:
    """A graph vertex: value, gradient accumulator and parent edges.

    ``grad`` is allocated (zeros) for leaves that require grad, and lazily for
    interior nodes the first time a gradient reaches them.
    """

    __slots__ = ("value", "grad", "parents", "requires_grad", "_backward", "name", "__weakref__")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.value = as_matrix(value)
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self._backward = backward_fn
        self.name = name
        self.grad = np.zeros_like(self.value) if (self.requires_grad and not self.parents) else None
        tape = _active_tape()
        if tape is not None and self.parents:
            tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return not self.parents

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def detach(self) -> np.ndarray:
        return self.value.copy()

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def parameter(value, name=None) -> Node:
    return Node(value, requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def make_node(value, parents: Sequence[Node], backward_fn: Callable) -> Node:
    """Create an op output. ``backward_fn(g)`` returns one gradient per parent
    (``None`` for parents that need none)."""
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Node(value)
    return Node(value, requires_grad=True, parents=parents, backward_fn=backward_fn)


class Tape:
    """Records op nodes in creation order while active (``with Tape() as t``)."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Node):
        backward(loss, tape=self)


def _topological(loss: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return [n for n in order if n.parents]


def backward(loss: Node, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(param) into every reachable parameter's ``grad``.

    Gradients accumulate; callers zero them between steps.
    """
    if loss.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if not loss.requires_grad:
        return
    if tape is not None and loss.parents:
        try:
            end = _index_of(tape.nodes, loss)
        except ValueError:
            raise ValueError("loss was not recorded on this tape") from None
        order = tape.nodes[: end + 1]
    else:
        order = _topological(loss)

    pending = {id(loss): np.ones((1, 1))}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g
        else:
            node.grad = node.grad + g
        grads = node._backward(g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.parents:
                prev = pending.get(id(parent))
                pending[id(parent)] = pg if prev is None else prev + pg
            else:
                parent.grad += pg
    if loss.is_leaf and loss.requires_grad:
        loss.grad += 1.0


def _index_of(nodes, target):
    for i in range(len(nodes) - 1, -1, -1):
        if nodes[i] is target:
            return i
    raise ValueError


def zero_grad(params: Sequence[Node]) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# structural and elementwise ops


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    sa, sb = a.shape, b.shape
    for x, y in zip(sa, sb):
        if x != y and x != 1 and y != 1:
            raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def matmul(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    av, bv = a.value, b.value

    def back(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return make_node(av @ bv, (a, b), back)


def add(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_node(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_node(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Node:
    """Hadamard product (with row/column broadcasting)."""
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value

    def back(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return make_node(av * bv, (a, b), back)


def div(a, b) -> Node:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "div")
    av, bv = a.value, b.value

    def back(g):
        return _unbroadcast(g / bv, av.shape), _unbroadcast(-g * av / (bv * bv), bv.shape)

    return make_node(av / bv, (a, b), back)


def scale(a: Node, c: float) -> Node:
    return make_node(a.value * c, (a,), lambda g: (g * c,))


def exp(a: Node) -> Node:
    y = np.exp(a.value)
    return make_node(y, (a,), lambda g: (g * y,))


def log(a: Node, floor: float = 0.0) -> Node:
    """Natural log; with ``floor > 0`` computes log(max(a, floor))."""
    av = a.value
    if floor > 0:
        clipped = np.maximum(av, floor)
        return make_node(np.log(clipped), (a,), lambda g: (np.where(av > floor, g / clipped, 0.0),))
    if np.any(av <= 0):
        raise DomainError("log of a non-positive entry; pass a floor")
    return make_node(np.log(av), (a,), lambda g: (g / av,))


def power(a: Node, exponent: float) -> Node:
    av = a.value
    return make_node(av**exponent, (a,), lambda g: (g * exponent * av ** (exponent - 1),))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return make_node(a.value * mask, (a,), lambda g: (g * mask,))


def transpose(a: Node) -> Node:
    return make_node(a.value.T.copy(), (a,), lambda g: (g.T,))


def sum_all(a: Node) -> Node:
    shape = a.shape
    return make_node(a.value.sum().reshape(1, 1), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean(a: Node) -> Node:
    shape = a.shape
    n = a.value.size
    return make_node(a.value.mean().reshape(1, 1), (a,), lambda g: (np.full(shape, g[0, 0] / n),))


def mean_rows(a: Node) -> Node:
    """Average over rows: n x k -> 1 x k."""
    n = a.shape[0]
    return make_node(a.value.mean(axis=0, keepdims=True), (a,), lambda g: (np.repeat(g / n, n, axis=0),))


def sum_rows(a: Node) -> Node:
    """Row sums: n x k -> n x 1."""
    k = a.shape[1]
    return make_node(a.value.sum(axis=1, keepdims=True), (a,), lambda g: (np.repeat(g, k, axis=1),))


def concat_rows(nodes: Sequence[Node]) -> Node:
    nodes = [_lift(n) for n in nodes]
    cols = {n.shape[1] for n in nodes}
    if len(cols) != 1:
        raise ShapeError(f"concat_rows: column counts differ {[n.shape for n in nodes]}")
    bounds = np.cumsum([0] + [n.shape[0] for n in nodes])

    def back(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(nodes)))

    return make_node(np.concatenate([n.value for n in nodes], axis=0), nodes, back)


def slice_rows(a: Node, start: int, stop: int) -> Node:
    n, k = a.shape
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice_rows: [{start}:{stop}] outside {a.shape}")

    def back(g):
        out = np.zeros((n, k))
        out[start:stop] = g
        return (out,)

    return make_node(a.value[start:stop].copy(), (a,), back)


# ---------------------------------------------------------------------------
# row-wise ops backed by the kernel module


def row_l2_normalize(a: Node, epsilon: float = NORM_EPS) -> Node:
    """Divide each row by max(||row||, epsilon). Rows with norm below epsilon
    receive no gradient."""
    av = a.value
    return make_node(
        kernels.l2_normalize_rows(av, epsilon),
        (a,),
        lambda g: (kernels.l2_normalize_rows_backward(av, np.ascontiguousarray(g), epsilon),),
    )


def softmax_rows(a: Node, temperature: float = 1.0) -> Node:
    if not temperature > 0:
        raise DomainError(f"softmax temperature must be positive, got {temperature}")
    y = kernels.softmax_rows(a.value, temperature)
    return make_node(
        y, (a,), lambda g: (kernels.softmax_rows_backward(y, np.ascontiguousarray(g), temperature),)
    )


def sharpen_rows(p: Node, temperature: float, floor: float = LOG_FLOOR) -> Node:
    """Differentiable sharpening: p**(1/T) renormalized per row."""
    if not temperature > 0:
        raise DomainError(f"sharpening temperature must be positive, got {temperature}")
    pv = p.value
    y = kernels.sharpen_rows(pv, temperature, floor)
    return make_node(
        y,
        (p,),
        lambda g: (kernels.sharpen_rows_backward(pv, y, np.ascontiguousarray(g), temperature, floor),),
    )


def cross_entropy_rows(target, pred: Node, floor: float = LOG_FLOOR) -> Node:
    """Mean over rows of H(target_i, pred_i) = -sum_k t_ik log max(p_ik, floor).

    ``target`` is a constant array; no gradient flows into it.
    """
    if isinstance(target, Node):
        raise TypeError("cross_entropy_rows target must be a constant array, not a Node")
    t = as_matrix(target)
    if t.shape != pred.shape:
        raise ShapeError(f"cross_entropy_rows: target {t.shape} vs prediction {pred.shape}")
    sums = t.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-9):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValueError(f"target row {bad} sums to {sums[bad]!r}, expected 1")
    pv = pred.value
    value = kernels.cross_entropy_rows(t, pv, floor)

    def back(g):
        return (kernels.cross_entropy_rows_backward(t, pv, floor) * g[0, 0],)

    return make_node(np.array([[value]]), (pred,), back)


def entropy_rows(p: Node, floor: float = LOG_FLOOR) -> Node:
    """Mean over rows of the Shannon entropy -sum_k p_ik log max(p_ik, floor),
    differentiated through both occurrences of p."""
    pv = p.value
    clipped = np.maximum(pv, floor)
    logs = np.log(clipped)
    n = pv.shape[0]
    value = -(pv * logs).sum() / n

    def back(g):
        d = -(logs + np.where(pv > floor, 1.0, 0.0))
        return (d * (g[0, 0] / n),)

    return make_node(np.array([[value]]), (p,), back)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    flagged: list[list[tuple[int, int]]] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return not any(self.flagged)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error, default=0.0)


def grad_check(
    f: Callable[[], Node],
    params: Sequence[Node],
    h: float = 1e-5,
    tol: float = 1e-4,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central differences.

    Relative error per entry is |a - n| / max(|a|, |n|, abs_floor); entries
    above ``tol`` are flagged.
    """
    first = f().value[0, 0]
    second = f().value[0, 0]
    if first != second:
        raise DeterminismError(f"f() is not deterministic: {first!r} != {second!r}")

    zero_grad(params)
    loss = f()
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    errors, flagged = [], []
    for p, ga in zip(params, analytic):
        worst, bad = 0.0, []
        v = p.value
        for idx in np.ndindex(v.shape):
            orig = v[idx]
            v[idx] = orig + h
            up = f().value[0, 0]
            v[idx] = orig - h
            down = f().value[0, 0]
            v[idx] = orig
            num = (up - down) / (2 * h)
            err = abs(ga[idx] - num) / max(abs(ga[idx]), abs(num), abs_floor)
            worst = max(worst, err)
            if err > tol:
                bad.append(idx)
        errors.append(worst)
        flagged.append(bad)
    zero_grad(params)
    return GradCheckReport(errors, flagged, tol)
