"""Dense tensors with reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` set records its inputs
and a closure that pushes the output adjoint back to them.  Each tensor is
stamped with a monotonically increasing sequence number at creation, so
replaying closures in descending sequence order visits operations in exact
reverse execution order.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

_seq = itertools.count()
_grad_enabled = True


class InvalidStateError(RuntimeError):
    pass


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._seq = next(_seq)

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # elementwise arithmetic, enough for composing losses and tests

    def __add__(self, other):
        other = _wrap(other, self.dtype)
        out_data = self.data + other.data

        def back(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)

        return _record(out_data, (self, other), back)

    __radd__ = __add__

    def __mul__(self, other):
        other = _wrap(other, self.dtype)
        out_data = self.data * other.data

        def back(g):
            return (_unbroadcast(g * other.data, self.shape),
                    _unbroadcast(g * self.data, other.shape))

        return _record(out_data, (self, other), back)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-_wrap(other, self.dtype))

    def __rsub__(self, other):
        return _wrap(other, self.dtype) + (-self)

    def __pow__(self, p):
        p = float(p)

        def back(g):
            return (g * p * self.data ** (p - 1),)

        return _record(self.data ** p, (self,), back)

    def sum(self):
        def back(g):
            return (np.broadcast_to(g, self.shape).astype(self.dtype, copy=True),)

        return _record(np.asarray(self.data.sum(), dtype=self.dtype), (self,), back)

    def mean(self):
        return self.sum() * (1.0 / self.size)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape

        def back(g):
            return (g.reshape(old),)

        return _record(self.data.reshape(shape), (self,), back)


def _wrap(x, dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _record(data, parents, back):
    """Create the output tensor of an op and attach its adjoint closure.

    ``back`` maps the output adjoint to one adjoint per parent (``None`` for
    parents that need none).
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = parents
        out._backward = back
    return out


def graph(loss):
    """Ops reachable from ``loss``, in execution order."""
    seen = set()
    nodes = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._backward is not None:
            nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq)
    return nodes


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    adj = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph(loss)):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None:
                continue
            if parent._backward is not None:
                key = id(parent)
                adj[key] = adj[key] + pg if key in adj else pg
            elif parent.requires_grad:
                pg = np.asarray(pg, dtype=parent.dtype)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
    if loss._backward is None and loss.requires_grad:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1


def sgd_step(params, lr):
    """Plain gradient step ``p <- p - lr * grad`` followed by clearing grads.

    ``params`` is an iterable of tensors or a name->tensor mapping.
    """
    if hasattr(params, "values"):
        params = list(params.values())
    params = list(params)
    for p in params:
        if p.grad is None:
            raise InvalidStateError(f"parameter {p.name or p!r} has no gradient")
    for p in params:
        if lr != 0:
            p.data = p.data - np.asarray(lr, dtype=p.dtype) * p.grad
        p.grad = None
