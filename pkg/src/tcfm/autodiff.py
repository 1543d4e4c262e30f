"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Graphs are rebuilt every step. Each op records its parents and a closure that
pushes the upstream gradient into them. ``backward`` walks nodes in reverse
creation order, which is a valid topological order because a node is always
created after its inputs.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()


class GraphError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_tensor(data, *, check_finite: bool = True) -> np.ndarray:
    """Copy ``data`` into a float64 array, rejecting NaN/Inf literals."""
    arr = np.array(data, dtype=np.float64)
    if check_finite and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value in tensor literal of shape {arr.shape}")
    return arr


class Node:
    __slots__ = ("value", "_grad", "parents", "requires_grad", "op", "_backward", "_id", "_consumed")

    def __init__(self, value, requires_grad: bool = False, *, parents: tuple = (), op: str = "leaf",
                 backward: Callable[[np.ndarray], None] | None = None, _checked: bool = False):
        self.value = value if _checked else as_tensor(value)
        self._grad = None
        self.parents = parents
        self.requires_grad = requires_grad
        self.op = op
        self._backward = backward
        self._id = next(_ids)
        self._consumed = False

    @property
    def grad(self) -> np.ndarray:
        # allocated on first use; reads before any accumulation see zeros
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g) -> None:
        self._grad = g

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def constant(value) -> Node:
    return Node(value, requires_grad=False)


def parameter(value) -> Node:
    return Node(value, requires_grad=True)


def _lift(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _make(value: np.ndarray, parents: tuple, op: str, backward) -> Node:
    needs = any(p.requires_grad for p in parents)
    return Node(value, needs, parents=parents if needs else (), op=op,
                backward=backward if needs else None, _checked=True)


def _acc(node: Node, g) -> None:
    if node.requires_grad:
        g = g() if callable(g) else g
        if node._grad is None:
            node._grad = np.array(g, dtype=np.float64)
        else:
            node._grad += g


def _check_binary(a: Node, b: Node, op: str) -> None:
    if a.shape != b.shape and a.value.ndim != 0 and b.value.ndim != 0:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unscalar(g: np.ndarray, node: Node) -> np.ndarray:
    # a scalar operand was broadcast: reduce the gradient back to ()
    return np.asarray(g.sum()) if node.value.ndim == 0 and g.ndim != 0 else g


# --- elementwise ---------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _check_binary(a, b, "add")

    def bw(g):
        _acc(a, _unscalar(g, a))
        _acc(b, _unscalar(g, b))
    return _make(a.value + b.value, (a, b), "add", bw)


def sub(a: Node, b: Node) -> Node:
    _check_binary(a, b, "sub")

    def bw(g):
        _acc(a, _unscalar(g, a))
        _acc(b, _unscalar(-g, b))
    return _make(a.value - b.value, (a, b), "sub", bw)


def mul(a: Node, b: Node) -> Node:
    _check_binary(a, b, "mul")

    def bw(g):
        _acc(a, lambda: _unscalar(g * b.value, a))
        _acc(b, lambda: _unscalar(g * a.value, b))
    return _make(a.value * b.value, (a, b), "mul", bw)


def scale(a: Node, k: float) -> Node:
    k = float(k)

    def bw(g):
        _acc(a, k * g)
    return _make(k * a.value, (a,), "scale", bw)


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)

    def bw(g):
        _acc(a, g * (1.0 - y * y))
    return _make(y, (a,), "tanh", bw)


def square(a: Node) -> Node:
    def bw(g):
        _acc(a, 2.0 * a.value * g)
    return _make(a.value * a.value, (a,), "square", bw)


def sin(a: Node) -> Node:
    def bw(g):
        _acc(a, g * np.cos(a.value))
    return _make(np.sin(a.value), (a,), "sin", bw)


def cos(a: Node) -> Node:
    def bw(g):
        _acc(a, -g * np.sin(a.value))
    return _make(np.cos(a.value), (a,), "cos", bw)


_BINARY = {"add": add, "sub": sub, "mul": mul}
_UNARY = {"tanh": tanh, "square": square, "sin": sin, "cos": cos}


def elementwise(op_kind: str, a: Node, b: Node | float | None = None) -> Node:
    """Dispatch by name; ``scale`` takes a python number as ``b``."""
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, _lift(b))
    if op_kind == "scale":
        if b is None or isinstance(b, Node):
            raise ValueError("scale needs a numeric constant")
        return scale(a, b)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    raise ValueError(f"unknown op {op_kind!r}")


# --- linear algebra and shape ops ---------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    """2-D @ 2-D or 2-D @ 1-D product."""
    if a.value.ndim != 2 or b.value.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        if b.value.ndim == 1:
            _acc(a, lambda: np.outer(g, b.value))
        else:
            _acc(a, lambda: g @ b.value.T)
        _acc(b, lambda: a.value.T @ g)
    return _make(a.value @ b.value, (a, b), "matmul", bw)


def matvec(W: Node, x: Node) -> Node:
    if W.value.ndim != 2 or x.value.ndim != 1:
        raise ValueError(f"matvec: expected matrix and vector, got {W.shape} and {x.shape}")
    return matmul(W, x)


def broadcast_rows(b: Node, n: int) -> Node:
    """Stack a 1-D node ``n`` times into an (n, len) matrix."""
    if b.value.ndim != 1:
        raise ValueError(f"broadcast_rows expects a vector, got {b.shape}")

    def bw(g):
        _acc(b, g.sum(axis=0))
    return _make(np.broadcast_to(b.value, (n, b.shape[0])).copy(), (b,), "broadcast_rows", bw)


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = tuple(nodes)
    sizes = [n.shape[axis] for n in nodes]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            if n.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                n.grad += g[tuple(idx)]
    return _make(np.concatenate([n.value for n in nodes], axis=axis), nodes, "concat", bw)


def slice_rows(a: Node, start: int, stop: int) -> Node:
    """Rows ``start:stop`` along axis 0."""
    def bw(g):
        if a.requires_grad:
            a.grad[start:stop] += g
    return _make(a.value[start:stop].copy(), (a,), "slice", bw)


def reshape(a: Node, shape: tuple[int, ...]) -> Node:
    def bw(g):
        _acc(a, g.reshape(a.shape))
    return _make(a.value.reshape(shape).copy(), (a,), "reshape", bw)


# --- reductions -----------------------------------------------------------

def reduce_mean_sq(a: Node) -> Node:
    n = a.value.size
    if n == 0:
        raise ValueError("reduce_mean_sq of an empty tensor")

    def bw(g):
        _acc(a, (2.0 / n) * a.value * g)
    return _make(np.asarray(np.mean(a.value * a.value)), (a,), "mean_sq", bw)


def sum_all(a: Node) -> Node:
    def bw(g):
        _acc(a, np.broadcast_to(g, a.shape).copy())
    return _make(np.asarray(a.value.sum()), (a,), "sum", bw)


def check_finite(a: Node, where: str = "") -> Node:
    if not np.all(np.isfinite(a.value)):
        raise NonFiniteError(f"non-finite values in {a.op} node{' at ' + where if where else ''}")
    return a


# --- backward ---------------------------------------------------------------

def backward(root: Node) -> dict[Node, np.ndarray]:
    """Accumulate d(root)/d(node) into every reachable node that requires grad.

    Returns a map from each reachable leaf parameter to its gradient. A graph
    may only be differentiated once.
    """
    if root.value.size != 1 or root.value.ndim > 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    order: list[Node] = []
    seen: set[int] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        order.append(node)
        stack.extend(node.parents)
    for node in order:
        if node._consumed:
            raise GraphError("backward() already ran through this graph; rebuild it")
    order.sort(key=lambda n: n._id, reverse=True)
    if root.requires_grad:
        root.grad = root.grad + np.ones_like(root.value)
    leaves = {}
    for node in order:
        if node._backward is not None:
            node._backward(node.grad)
            node._consumed = True
        else:
            leaves[node] = node.grad
    return leaves


def grad_check(f: Callable[[], Node], params: Iterable[Node], h: float = 1e-5) -> float:
    """Max relative error between ``backward`` and central differences.

    ``f`` must rebuild its graph from the current values of ``params`` on each
    call and be deterministic.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    params = list(params)
    for p in params:
        p.grad = np.zeros_like(p.value)
    root = f()
    if not np.isfinite(root.value).all():
        raise NonFiniteError("grad_check: f is not finite")
    backward(root)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().value)
            flat[i] = orig - h
            fm = float(f().value)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("grad_check: f is not finite at a perturbed point")
            numeric = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
