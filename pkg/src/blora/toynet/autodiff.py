"""Minimal reverse-mode autodiff over float64 numpy arrays.

Only the handful of ops the toy network needs. Shapes must match exactly;
there is no broadcasting, so every gradient rule is a plain transpose or
reshape of the forward rule.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError


class Var:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, parents=(), backward=None) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other: "Var") -> "Var":
        return add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return sub(self, other)

    def __matmul__(self, other: "Var") -> "Var":
        return matmul(self, other)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if self.value.size != 1:
            raise ValueError("backward() starts from a scalar")
        order: list[Var] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((p, False) for p in node._parents)
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _node(value, parents, backward) -> Var:
    needs = any(p.requires_grad for p in parents)
    return Var(value, needs, parents if needs else (), backward if needs else None)


def _accum(v: Var, g: np.ndarray) -> None:
    if v.requires_grad:
        v.grad = g if v.grad is None else v.grad + g


def _check(a: Var, b: Var, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Var, b: Var) -> Var:
    _check(a, b, "add")

    def back(g):
        _accum(a, g)
        _accum(b, g)
    return _node(a.value + b.value, (a, b), back)


def sub(a: Var, b: Var) -> Var:
    _check(a, b, "sub")

    def back(g):
        _accum(a, g)
        _accum(b, -g)
    return _node(a.value - b.value, (a, b), back)


def scale(a: Var, c: float) -> Var:
    return _node(a.value * c, (a,), lambda g: _accum(a, g * c))


def matmul(a: Var, b: Var) -> Var:
    """2-D or equal-batch 3-D matrix product."""
    if a.value.ndim != b.value.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} x {b.shape}")

    def back(g):
        _accum(a, g @ np.swapaxes(b.value, -1, -2))
        _accum(b, np.swapaxes(a.value, -1, -2) @ g)
    return _node(a.value @ b.value, (a, b), back)


def transpose(a: Var, axes: tuple[int, ...] | None = None) -> Var:
    axes = tuple(reversed(range(a.value.ndim))) if axes is None else axes
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.value, axes), (a,), lambda g: _accum(a, np.transpose(g, inv)))


def reshape(a: Var, shape: tuple[int, ...]) -> Var:
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: _accum(a, g.reshape(old)))


def softmax(a: Var) -> Var:
    """Softmax over the last axis, max-shifted."""
    e = np.exp(a.value - a.value.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        _accum(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))
    return _node(y, (a,), back)


def mse(pred: Var, target: np.ndarray) -> Var:
    """Mean squared error against a constant target."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.value - target
    n = diff.size

    def back(g):
        _accum(pred, g * (2.0 / n) * diff)
    return _node(np.array((diff * diff).sum() / n), (pred,), back)
