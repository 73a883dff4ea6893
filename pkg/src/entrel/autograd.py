"""Minimal reverse-mode automatic differentiation over numpy arrays.

Purpose-built for the scorers in this package: a handful of dense ops plus
an embedding-row gather whose gradient is accumulated sparsely (as
(indices, rows) chunks) so that training never materializes a dense
gradient for a large embedding table.
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(ArithmeticError):
    """A value or gradient in the computation became NaN or infinite."""


class Var:
    """Node in the computation graph: a float64 array plus gradient slots."""

    __slots__ = ("value", "grad", "chunks", "_parents", "_backprop")

    def __init__(self, value, parents=(), backprop=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None          # dense gradient accumulator
        self.chunks = None        # list of (row_indices, row_grads) for tables
        self._parents = parents
        self._backprop = backprop

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def _accum_rows(self, idx, rows):
        if self.chunks is None:
            self.chunks = []
        self.chunks.append((idx, rows))

    def dense_grad(self) -> np.ndarray:
        """Gradient with sparse chunks folded in; zeros if never touched."""
        out = np.zeros_like(self.value) if self.grad is None else np.array(self.grad)
        if self.chunks:
            for idx, rows in self.chunks:
                np.add.at(out, idx, rows)
        return out

    def clear_grad(self):
        self.grad = None
        self.chunks = None

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def lift(value) -> Var:
    return Var(value)


def add(a: Var, b: Var) -> Var:
    out = Var(a.value + b.value, (a, b))

    def backprop(g):
        a._accum(g)
        b._accum(g)

    out._backprop = backprop
    return out


def shift(a: Var, c: float) -> Var:
    out = Var(a.value + c, (a,))
    out._backprop = a._accum
    return out


def scale(a: Var, c: float) -> Var:
    out = Var(a.value * c, (a,))

    def backprop(g):
        a._accum(g * c)

    out._backprop = backprop
    return out


def tanh(a: Var) -> Var:
    t = np.tanh(a.value)
    out = Var(t, (a,))

    def backprop(g):
        a._accum(g * (1.0 - t * t))

    out._backprop = backprop
    return out


def matvec(w: Var, x: Var) -> Var:
    out = Var(w.value @ x.value, (w, x))

    def backprop(g):
        w._accum(np.outer(g, x.value))
        x._accum(w.value.T @ g)

    out._backprop = backprop
    return out


def dot(a: Var, b: Var) -> Var:
    out = Var(a.value @ b.value, (a, b))

    def backprop(g):
        a._accum(g * b.value)
        b._accum(g * a.value)

    out._backprop = backprop
    return out


def gather_mean(table: Var, idx: np.ndarray) -> Var:
    """Mean of the table rows selected by idx (idx must be non-empty)."""
    if len(idx) == 0:
        raise ValueError("gather_mean requires at least one index")
    rows = table.value[idx]
    out = Var(rows.mean(axis=0), (table,))
    inv = 1.0 / len(idx)

    def backprop(g):
        table._accum_rows(idx, np.broadcast_to(g * inv, (len(idx), g.shape[0])))

    out._backprop = backprop
    return out


def gather_row(table: Var, i: int) -> Var:
    out = Var(table.value[i], (table,))

    def backprop(g):
        table._accum_rows(np.array([i]), g[None, :])

    out._backprop = backprop
    return out


def max_stack(xs: list[Var]) -> Var:
    """Max of scalar nodes; the subgradient is routed to the lowest-index argmax."""
    if not xs:
        raise ValueError("max_stack requires at least one input")
    values = [float(x.value) for x in xs]
    best = int(np.argmax(values))  # argmax returns the first maximizer
    winner = xs[best]
    out = Var(values[best], (winner,))
    out._backprop = winner._accum
    return out


def smooth_max(xs: list[Var], tau: float) -> Var:
    """tau * log(sum(exp(x / tau))): a soft maximum spreading gradient to all inputs."""
    if not xs:
        raise ValueError("smooth_max requires at least one input")
    if tau <= 0:
        raise ValueError("tau must be positive")
    values = np.array([float(x.value) for x in xs])
    m = values.max()
    z = np.exp((values - m) / tau)
    total = z.sum()
    out = Var(m + tau * np.log(total), tuple(xs))
    weights = z / total

    def backprop(g):
        for x, w in zip(xs, weights):
            x._accum(g * w)

    out._backprop = backprop
    return out


def logistic_nll(score: Var, label: int) -> Var:
    """Negative log-likelihood of a binary label under sigmoid(score)."""
    s = float(score.value)
    out = Var(np.logaddexp(0.0, s) - label * s, (score,))
    p = float(np.exp(-np.logaddexp(0.0, -s)))

    def backprop(g):
        score._accum(g * (p - label))

    out._backprop = backprop
    return out


def backward(root: Var) -> None:
    """Backpropagate from a finite scalar root, accumulating into leaf grads.

    Leaf gradients are accumulated (not reset), so several roots sharing the
    same leaves sum their contributions; intermediate nodes are per-graph.
    """
    if root.value.shape != ():
        raise ValueError("backward expects a scalar root")
    if not np.isfinite(root.value):
        raise NonFiniteError(f"loss is {float(root.value)}")

    topo: list[Var] = []
    visited: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    root._accum(np.ones(()))
    for node in reversed(topo):
        if node._backprop is not None and node.grad is not None:
            node._backprop(node.grad)
