"""Reverse-mode autodiff on numpy arrays.

A Tensor wraps an ndarray plus an optional gradient buffer. Operations
build a dynamic graph of backward closures; Tensor.backward() runs them
in reverse topological order. Graphs are single-use: a second backward
call on the same root raises. Leaf tensors created with
requires_grad=True keep a persistent gradient buffer that accumulates
across backward calls until zero_grad().
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_spent")

    def __init__(self, data, requires_grad=False, parents=(), backward=None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if (requires_grad and not parents) else None
        self._parents = parents
        self._backward = backward
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> np.ndarray:
        return self.data

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        """Backpropagate from a scalar root through the recorded graph."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar root")
        if self._spent:
            raise RuntimeError("backward was already run for this graph; run forward again")
        if self._backward is None and not self._parents:
            if not self.requires_grad:
                raise RuntimeError("backward on a tensor with no recorded graph")
        topo: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            # free graph memory; also makes a second backward impossible
            if node is not self:
                node._parents = ()
                node._backward = None
        self._spent = True

    # scalar-friendly arithmetic used by the loss expressions ------------

    def _binary(self, other, fwd, bwd_a, bwd_b):
        other_t = other if isinstance(other, Tensor) else Tensor(np.asarray(other, self.dtype))
        if other_t.shape != self.shape and other_t.data.size != 1 and self.data.size != 1:
            raise ValueError(f"shape mismatch: {self.shape} vs {other_t.shape}")
        out_data = fwd(self.data, other_t.data)
        if not _grad_enabled or not (self.requires_grad or other_t.requires_grad):
            return Tensor(out_data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(bwd_a(g, self.data, other_t.data), self.shape))
            if other_t.requires_grad:
                other_t._accumulate(_unbroadcast(bwd_b(g, self.data, other_t.data), other_t.shape))

        return Tensor(out_data, requires_grad=True, parents=(self, other_t), backward=backward)

    def __add__(self, other):
        return self._binary(other, lambda a, b: a + b, lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, lambda a, b: a - b, lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return self._binary(other, lambda a, b: b - a, lambda g, a, b: -g, lambda g, a, b: g)

    def __mul__(self, other):
        return self._binary(
            other, lambda a, b: a * b, lambda g, a, b: g * b, lambda g, a, b: g * a
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(
            other,
            lambda a, b: a / b,
            lambda g, a, b: g / b,
            lambda g, a, b: -g * a / (b * b),
        )

    def sum(self) -> "Tensor":
        out_data = np.asarray(self.data.sum(), dtype=self.dtype)
        if not _grad_enabled or not self.requires_grad:
            return Tensor(out_data)

        def backward(g):
            self._accumulate(np.broadcast_to(g, self.shape))

        return Tensor(out_data, requires_grad=True, parents=(self,), backward=backward)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    if g.shape == shape:
        return g
    if int(np.prod(shape, dtype=np.int64)) == 1:
        return np.asarray(g.sum(), dtype=g.dtype).reshape(shape)
    raise ValueError(f"cannot reduce gradient of shape {g.shape} to {shape}")


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True)
