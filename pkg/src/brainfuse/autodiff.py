"""Reverse-mode automatic differentiation over dense float64 matrices.

Every value is a 2-D matrix; scalars are 1x1. Each operation records its
input nodes and a vector-Jacobian closure on the output node, so a forward
pass rebuilds the graph from scratch (define-by-run). ``backward`` walks
the reachable nodes in reverse topological order and accumulates parent
gradients by summation, which makes fan-out (one tensor feeding several
consumers) come out right automatically.

The engine is deliberately small: dense matrices only, double precision,
row broadcasting only, no views, no in-place ops. It is sized for graphs
of a few hundred nodes over matrices with tens of rows and columns. There
is no shared global tape, so independent graphs may be built and
differentiated concurrently on separate threads.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatchError(ValueError):
    """Operands fed to a primitive do not have compatible shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' and '.join(str(s) for s in shapes)}")


class DomainError(ValueError):
    """Input outside the mathematical domain of a primitive (e.g. log of <= 0)."""


class Tensor:
    """A 2-D float64 matrix node in the compute graph.

    ``grad`` is lazily allocated by ``backward`` and always has the same
    shape as ``values``. Leaf tensors (parameters, inputs) have no parents.
    """

    __slots__ = ("values", "requires_grad", "grad", "name", "_parents", "_vjp")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        v = np.asarray(values, dtype=np.float64)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        if v.ndim != 2:
            raise ShapeMismatchError("tensor", v.shape)
        self.values = v
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._vjp = None

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        if self.values.shape != (1, 1):
            raise ShapeMismatchError("item", self.values.shape)
        return float(self.values[0, 0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # Convenience operators; mul dispatches on the operand type.
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    def __rmul__(self, other):
        return scalar_mul(self, float(other))

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad}{tag})"


def _node(values: np.ndarray, parents, vjp) -> Tensor:
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _accumulate(parent: Tensor, grad: np.ndarray):
    if parent.grad is None:
        parent.grad = np.array(grad, dtype=np.float64)
    else:
        parent.grad += grad


def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    ``loss`` must be scalar (1x1). Gradients accumulate across uses: call
    ``zero_grad`` on leaves between passes.
    """
    if loss.values.shape != (1, 1):
        raise ShapeMismatchError("backward", loss.values.shape)
    if not loss.requires_grad:
        return

    # Iterative post-order DFS: creation order of parents precedes children,
    # so the resulting list is a valid topological order of the tape.
    order = []
    seen = set()
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones((1, 1), dtype=np.float64)
    for node in reversed(order):
        if node._vjp is None or node.grad is None:
            continue
        for parent, g in node._vjp(node.grad):
            if parent.requires_grad:
                _accumulate(parent, g)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.shape[1] != b.values.shape[0]:
        raise ShapeMismatchError("matmul", a.values.shape, b.values.shape)

    def vjp(g):
        return ((a, g @ b.values.T), (b, a.values.T @ g))

    return _node(a.values @ b.values, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    def vjp(g):
        return ((a, g.T.copy()),)

    return _node(a.values.T.copy(), (a,), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.values.shape != b.values.shape:
        raise ShapeMismatchError("add", a.values.shape, b.values.shape)

    def vjp(g):
        return ((a, g), (b, g))

    return _node(a.values + b.values, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.values.shape != b.values.shape:
        raise ShapeMismatchError("sub", a.values.shape, b.values.shape)

    def vjp(g):
        return ((a, g), (b, -g))

    return _node(a.values - b.values, (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product."""
    if a.values.shape != b.values.shape:
        raise ShapeMismatchError("mul", a.values.shape, b.values.shape)

    def vjp(g):
        return ((a, g * b.values), (b, g * a.values))

    return _node(a.values * b.values, (a, b), vjp)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def vjp(g):
        return ((a, c * g),)

    return _node(c * a.values, (a,), vjp)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.values.shape[0] != b.values.shape[0]:
        raise ShapeMismatchError("concat_cols", a.values.shape, b.values.shape)
    na = a.values.shape[1]

    def vjp(g):
        return ((a, g[:, :na].copy()), (b, g[:, na:].copy()))

    return _node(np.concatenate([a.values, b.values], axis=1), (a, b), vjp)


def row_mean(a: Tensor) -> Tensor:
    """Mean of each row: (n, m) -> (n, 1)."""
    m = a.values.shape[1]

    def vjp(g):
        return ((a, np.repeat(g, m, axis=1) / m),)

    return _node(a.values.mean(axis=1, keepdims=True), (a,), vjp)


def col_mean(a: Tensor) -> Tensor:
    """Mean of each column: (n, m) -> (1, m)."""
    n = a.values.shape[0]

    def vjp(g):
        return ((a, np.repeat(g, n, axis=0) / n),)

    return _node(a.values.mean(axis=0, keepdims=True), (a,), vjp)


def broadcast_row(a: Tensor, n_rows: int) -> Tensor:
    """Tile a single row to (n_rows, m)."""
    if a.values.shape[0] != 1:
        raise ShapeMismatchError("broadcast_row", a.values.shape)

    def vjp(g):
        return ((a, g.sum(axis=0, keepdims=True)),)

    return _node(np.repeat(a.values, n_rows, axis=0), (a,), vjp)


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    if a.values.size != rows * cols:
        raise ShapeMismatchError("reshape", a.values.shape, (rows, cols))
    old = a.values.shape

    def vjp(g):
        return ((a, g.reshape(old)),)

    return _node(a.values.reshape(rows, cols).copy(), (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign to avoid overflow in exp.
    x = a.values
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return ((a, g * out * (1.0 - out)),)

    return _node(out, (a,), vjp)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.values)

    def vjp(g):
        return ((a, g * (1.0 - out * out)),)

    return _node(out, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    # Subgradient 0 at exactly 0.
    mask = a.values > 0

    def vjp(g):
        return ((a, g * mask),)

    return _node(a.values * mask, (a,), vjp)


def softmax_rows(a: Tensor) -> Tensor:
    if not np.all(np.isfinite(a.values)):
        raise DomainError("softmax_rows: non-finite input")
    shifted = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        return ((a, out * (g - dot)),)

    return _node(out, (a,), vjp)


def log(a: Tensor) -> Tensor:
    if np.any(a.values <= 0) or not np.all(np.isfinite(a.values)):
        raise DomainError("log: input must be strictly positive and finite")

    def vjp(g):
        return ((a, g / a.values),)

    return _node(np.log(a.values), (a,), vjp)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only strictly inside."""
    mask = (a.values > lo) & (a.values < hi)

    def vjp(g):
        return ((a, g * mask),)

    return _node(np.clip(a.values, lo, hi), (a,), vjp)


def abs_sum(a: Tensor) -> Tensor:
    """L1 norm of all entries, as a 1x1 tensor. Subgradient 0 at 0."""

    def vjp(g):
        return ((a, g[0, 0] * np.sign(a.values)),)

    return _node(np.array([[np.abs(a.values).sum()]]), (a,), vjp)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """Sum of all entries, as a 1x1 tensor."""

    def vjp(g):
        return ((a, np.full(a.values.shape, g[0, 0])),)

    return _node(np.array([[a.values.sum()]]), (a,), vjp)


def mean_of(tensors) -> Tensor:
    """Mean of a list of same-shape tensors (used for batch averaging)."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("mean_of: empty list")
    acc = tensors[0]
    for t in tensors[1:]:
        acc = add(acc, t)
    return scalar_mul(acc, 1.0 / len(tensors))
