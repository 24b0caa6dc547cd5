"""Reverse-mode autodiff over float64 numpy arrays."""
from __future__ import annotations

import contextlib

import numpy as np

from ..errors import StateError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """An array plus an optional gradient buffer and the op that produced it.

    ``backward_fn`` maps the upstream gradient to one gradient (or None)
    per parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "_consumed")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = ()
        self.backward_fn = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return self.backward_fn is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    def sum(self):
        from . import functional as F
        return F.sum(self)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every leaf's ``.grad``.

        The recorded graph is released afterwards; a second call raises
        :class:`StateError`.
        """
        if self._consumed:
            raise StateError("graph already consumed by a previous backward()")
        if self.backward_fn is None:
            raise StateError("backward() called on a tensor with no recorded forward pass")
        if grad is None:
            if self.data.size != 1:
                raise StateError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                if node.requires_grad:
                    if node.grad is None:
                        node.grad = np.zeros_like(node.data)
                    node.grad += g
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node.backward_fn is not None:
                node.backward_fn = None
                node.parents = ()
                node._consumed = True


def _topo_order(root):
    """Nodes in reverse topological order (root first)."""
    seen = set()
    post = []
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            post.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return post[::-1]


def make(data, parents, backward_fn):
    """Wrap an op result, recording the graph edge when any parent needs grad."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)
