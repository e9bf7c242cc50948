"""Tensor nodes and the reverse pass.

A ``Tensor`` wraps a float64 numpy array together with the parents it was
computed from and a closure that maps the output gradient onto parent
gradients. Graphs are built eagerly by calling ops; ``backward`` walks the
resulting DAG once in reverse topological order.
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when an op receives inputs with incompatible shapes."""


class Tensor:
    __slots__ = ("data", "parents", "grad_fn", "op", "name", "requires_grad")

    def __init__(self, data, parents=(), grad_fn=None, op="leaf", name=None, requires_grad=None):
        if type(data) is not np.ndarray or data.dtype != DTYPE:
            data = np.asarray(data, dtype=DTYPE)
        self.data = data
        self.parents = parents if type(parents) is tuple else tuple(parents)
        self.grad_fn = grad_fn
        self.op = op
        self.name = name
        if requires_grad is None:
            requires_grad = False
            for p in self.parents:
                if p.requires_grad:
                    requires_grad = True
                    break
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


class Parameter(Tensor):
    """Trainable leaf. ``data`` is updated in place by optimizers."""

    __slots__ = ()

    def __init__(self, data, name):
        super().__init__(np.array(data, dtype=DTYPE), name=name, requires_grad=True)

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=False)


def constant(x) -> Tensor:
    return Tensor(x, requires_grad=False)


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params=None) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to ``params``.

    ``params`` is a mapping name -> Parameter (or an iterable of Parameters).
    Parameters not reached by the graph get zero gradients.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is None:
        params = {}
    elif not isinstance(params, dict):
        params = {p.name: p for p in params}

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        for node in reversed(_toposort(loss)):
            g = grads.pop(id(node), None) if node.grad_fn is not None else grads.get(id(node))
            if g is None or node.grad_fn is None:
                continue
            parent_grads = node.grad_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    out = {}
    for name, p in params.items():
        g = grads.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=DTYPE).reshape(p.shape)
    return out
