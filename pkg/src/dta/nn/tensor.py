"""Minimal reverse-mode autodiff over float64 numpy arrays.

The graph is built eagerly: every operation returns a new ``Tensor`` that
remembers its parents and the vector-Jacobian product of each input.
``backward(loss)`` replays the graph in reverse topological order and
accumulates ``.grad`` on every tensor with ``requires_grad=True``.

Only the operations the model actually needs are implemented; everything
works on 64-bit floats so gradients can be validated against central
finite differences at tight tolerances.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_vjps", "name")

    def __init__(self, value, requires_grad=False, parents=(), vjps=(), name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._vjps = vjps
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self):
        backward(self)

    def item(self):
        return float(self.value)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value + b.value,
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g, a.value.shape),
            lambda g: _unbroadcast(g, b.value.shape),
        ),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value - b.value,
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g, a.value.shape),
            lambda g: _unbroadcast(-g, b.value.shape),
        ),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value * b.value,
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g * b.value, a.value.shape),
            lambda g: _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value / b.value,
        parents=(a, b),
        vjps=(
            lambda g: _unbroadcast(g / b.value, a.value.shape),
            lambda g: _unbroadcast(-g * a.value / b.value**2, b.value.shape),
        ),
    )


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.value.shape[-1] != b.value.shape[0]:
        raise ShapeError(
            f"matmul: inner dims {a.value.shape} @ {b.value.shape} do not match"
        )
    return Tensor(
        a.value @ b.value,
        parents=(a, b),
        vjps=(
            lambda g: g @ b.value.T,
            lambda g: a.value.T @ g,
        ),
    )


def square(a):
    a = as_tensor(a)
    return Tensor(a.value**2, parents=(a,), vjps=(lambda g: 2.0 * a.value * g,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return Tensor(out, parents=(a,), vjps=(lambda g: g / (2.0 * out),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return Tensor(out, parents=(a,), vjps=(lambda g: g * out,))


def log(a):
    a = as_tensor(a)
    return Tensor(np.log(a.value), parents=(a,), vjps=(lambda g: g / a.value,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.value)
    return Tensor(out, parents=(a,), vjps=(lambda g: g * (1.0 - out**2),))


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.value))
    return Tensor(out, parents=(a,), vjps=(lambda g: g * out * (1.0 - out),))


def softplus(a):
    """log(1 + exp(a)), overflow-safe."""
    a = as_tensor(a)
    out = np.maximum(a.value, 0.0) + np.log1p(np.exp(-np.abs(a.value)))
    s = 1.0 / (1.0 + np.exp(-a.value))
    return Tensor(out, parents=(a,), vjps=(lambda g: g * s,))


def clip_min(a, floor):
    """max(a, floor); gradient passes only where the input is above the floor."""
    a = as_tensor(a)
    mask = a.value > floor
    return Tensor(
        np.maximum(a.value, floor), parents=(a,), vjps=(lambda g: g * mask,)
    )


def tsum(a, axis=None):
    a = as_tensor(a)
    out = a.value.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), a.value.shape).copy()

    return Tensor(out, parents=(a,), vjps=(vjp,))


def tmean(a, axis=None):
    a = as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return tsum(a, axis=axis) / float(n)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.value.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * tensors[i].value.ndim
        sl[axis] = slice(offsets[i], offsets[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return Tensor(
        np.concatenate([t.value for t in tensors], axis=axis),
        parents=tuple(tensors),
        vjps=tuple(make_vjp(i) for i in range(len(tensors))),
    )


def getitem(a, idx):
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        out[idx] = g
        return out

    return Tensor(a.value[idx], parents=(a,), vjps=(vjp,))


def reshape(a, shape):
    a = as_tensor(a)
    return Tensor(
        a.value.reshape(shape), parents=(a,), vjps=(lambda g: g.reshape(a.value.shape),)
    )


def transpose(a):
    a = as_tensor(a)
    return Tensor(a.value.T, parents=(a,), vjps=(lambda g: g.T,))


def solve(A, b):
    """x = A^{-1} b for square A; gradients flow into both A and b.

    Used for ridge-regularized normal equations, so A is symmetric in
    practice (the VJP below handles general square A).
    """
    A, b = as_tensor(A), as_tensor(b)
    x = np.linalg.solve(A.value, b.value)

    def vjp_A(g):
        gb = np.linalg.solve(A.value.T, g)
        return -np.outer(gb, x) if x.ndim == 1 else -gb @ x.T

    def vjp_b(g):
        return np.linalg.solve(A.value.T, g)

    return Tensor(x, parents=(A, b), vjps=(vjp_A, vjp_b))


def backward(loss: Tensor):
    """Accumulate gradients of a scalar ``loss`` into every reachable tensor."""
    if loss.value.ndim != 0:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.value.shape}")

    # iterative DFS topo sort (graphs from long unrolls exceed recursion limits)
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    grads = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        for parent, vjp in zip(node._parents, node._vjps):
            if not parent.requires_grad:
                continue
            pg = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grads(tensors):
    for t in tensors:
        t.grad = None
