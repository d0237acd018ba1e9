"""Minimal reverse-mode autodiff on numpy arrays.

A ``Tensor`` wraps an ``ndarray`` (float64) and records the op that produced
it as a backward closure, micrograd-style. Calling :meth:`Tensor.backward` on
a scalar output walks the graph in reverse topological order and accumulates
``.grad`` arrays on every node with ``requires_grad``.

Only the ops the attention model needs are implemented; each backward is the
hand-derived vector-Jacobian product, kept exact so the finite-difference
harness can arbitrate.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    # sum away prepended axes
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    # sum over axes that were broadcast from size 1
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.value.shape

    # -- graph walk ---------------------------------------------------------

    def backward(self):
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar output")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if id(node) in seen:
                continue
            if expanded:
                seen.add(id(node))
                order.append(node)
                continue
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        out_val = self.value + other.value

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.value.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.value.shape))

        return Tensor(out_val, parents=(self, other), backward=bwd)

    __radd__ = __add__

    def __neg__(self):
        def bwd(g):
            self._accumulate(-g)

        return Tensor(-self.value, parents=(self,), backward=bwd)

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        out_val = self.value * other.value

        def bwd(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.value, self.value.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.value, other.value.shape))

        return Tensor(out_val, parents=(self, other), backward=bwd)

    __rmul__ = __mul__

    def __matmul__(self, other):
        other = as_tensor(other)
        out_val = self.value @ other.value

        def bwd(g):
            if self.requires_grad:
                if other.value.ndim == 1:
                    self._accumulate(np.outer(g, other.value) if self.value.ndim == 2 else g * other.value)
                else:
                    self._accumulate(np.atleast_1d(g) @ other.value.T)
            if other.requires_grad:
                if self.value.ndim == 1:
                    other._accumulate(np.outer(self.value, g) if other.value.ndim == 2 else g * self.value)
                else:
                    other._accumulate(self.value.T @ np.atleast_1d(g))

        return Tensor(out_val, parents=(self, other), backward=bwd)

    def sum(self, axis=None, keepdims=False):
        out_val = self.value.sum(axis=axis, keepdims=keepdims)

        def bwd(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.value.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gg, self.value.shape).copy())

        return Tensor(out_val, parents=(self,), backward=bwd)

    def mean(self, axis=None):
        n = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis=axis) * (1.0 / n)

    def reshape(self, *shape):
        out_val = self.value.reshape(*shape)
        orig = self.value.shape

        def bwd(g):
            self._accumulate(g.reshape(orig))

        return Tensor(out_val, parents=(self,), backward=bwd)

    def slice1d(self, start, stop):
        """View rows/entries [start:stop) along axis 0."""
        out_val = self.value[start:stop]

        def bwd(g):
            full = np.zeros_like(self.value)
            full[start:stop] = g
            self._accumulate(full)

        return Tensor(out_val, parents=(self,), backward=bwd)

    def item(self) -> float:
        return float(self.value)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(value) -> Tensor:
    return Tensor(value, requires_grad=True)


# -- functional ops ----------------------------------------------------------


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """y = x[idx] for an integer index array; backward scatters with add.at."""
    idx = np.asarray(idx)
    out_val = x.value[idx]

    def bwd(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, idx, g)
        x._accumulate(gx)

    return Tensor(out_val, parents=(x,), backward=bwd)


def select_positions(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """y_i = x[rows_i, cols_i]; used for label lookups in cross-entropy."""
    out_val = x.value[rows, cols]

    def bwd(g):
        gx = np.zeros_like(x.value)
        np.add.at(gx, (rows, cols), g)
        x._accumulate(gx)

    return Tensor(out_val, parents=(x,), backward=bwd)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_val = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.value.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, a, b in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(a, b)
                t._accumulate(g[tuple(sl)])

    return Tensor(out_val, parents=tuple(tensors), backward=bwd)


def add_constant(x: Tensor, c: np.ndarray) -> Tensor:
    """x + c with c held out of the graph (used for attention padding masks)."""
    out_val = x.value + c

    def bwd(g):
        x._accumulate(_unbroadcast(g, x.value.shape))

    return Tensor(out_val, parents=(x,), backward=bwd)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.value > 0
    out_val = np.where(pos, x.value, slope * x.value)

    def bwd(g):
        x._accumulate(g * np.where(pos, 1.0, slope))

    return Tensor(out_val, parents=(x,), backward=bwd)


def elu(x: Tensor) -> Tensor:
    pos = x.value > 0
    expm = np.expm1(np.minimum(x.value, 0.0))
    out_val = np.where(pos, x.value, expm)

    def bwd(g):
        x._accumulate(g * np.where(pos, 1.0, expm + 1.0))

    return Tensor(out_val, parents=(x,), backward=bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    # shifting by the (detached) row max leaves both value and gradient exact
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_val = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_val).sum(axis=axis, keepdims=True)
        x._accumulate(out_val * (g - dot))

    return Tensor(out_val, parents=(x,), backward=bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.value - x.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_val = shifted - lse
    soft = np.exp(out_val)

    def bwd(g):
        x._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return Tensor(out_val, parents=(x,), backward=bwd)


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), overflow-safe; softplus(-d) is the pairwise ranking loss."""
    out_val = np.logaddexp(0.0, x.value)
    sig = 1.0 / (1.0 + np.exp(-np.clip(x.value, -500, 500)))

    def bwd(g):
        x._accumulate(g * sig)

    return Tensor(out_val, parents=(x,), backward=bwd)
