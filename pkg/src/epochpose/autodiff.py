"""Tape-based reverse-mode differentiation over numpy arrays.

Operations on :class:`Tensor` always compute their value. They are recorded
only while a :class:`Tape` is active and at least one input is tracked
(a parameter, or the output of a recorded op), so the no-grad path costs
the same as plain numpy.

    with Tape() as tape:
        loss = (W @ x).sum()
    (dW,) = grad(tape, loss, [W])
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "tracked", "name")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tracked = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    def __len__(self):
        return len(self.data)

    # arithmetic
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Append-only record of primitive ops evaluated inside its context."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def grad(tape: Tape, output: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``output`` with respect to ``params``.

    Parameters that the output does not depend on get a zero gradient.
    """
    if output.data.size != 1:
        raise ValueError(f"grad needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.tracked:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    return [grads.get(id(p), np.zeros_like(p.data)) for p in params]


def value_and_grad(fn: Callable[[], Tensor], params: Sequence[Tensor]):
    with Tape() as tape:
        out = fn()
    return out, grad(tape, out, params)


# --- helpers ---------------------------------------------------------------

def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _val(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _record(data, inputs, vjp) -> Tensor:
    out = Tensor(data)
    if _ACTIVE and any(t.tracked for t in inputs):
        out.tracked = True
        _ACTIVE[-1].nodes.append(_Node(out, inputs, vjp))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- primitives --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    av, bv = a.data, b.data
    return _record(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    av, bv = a.data, b.data
    out = av / bv
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / bv, av.shape),
                              _unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> Tensor:
    a = astensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = astensor(a)
    av = a.data
    return _record(av ** p, (a,), lambda g: (g * p * av ** (p - 1),))


def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    av, bv = a.data, b.data
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _record(av @ bv, (a, b), vjp)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = astensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = astensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / n)


def abs_(a) -> Tensor:
    a = astensor(a)
    s = np.sign(a.data)
    return _record(np.abs(a.data), (a,), lambda g: (g * s,))


def sqrt(a) -> Tensor:
    a = astensor(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a) -> Tensor:
    a = astensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = astensor(a)
    av = a.data
    return _record(np.log(av), (a,), lambda g: (g / av,))


def sigmoid(a) -> Tensor:
    a = astensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = astensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = astensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def maximum(a, c: float) -> Tensor:
    """Elementwise max with a constant; subgradient 0 at the kink."""
    a = astensor(a)
    mask = a.data > c
    return _record(np.where(mask, a.data, c), (a,), lambda g: (g * mask,))


def sin(a) -> Tensor:
    a = astensor(a)
    av = a.data
    return _record(np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a) -> Tensor:
    a = astensor(a)
    av = a.data
    return _record(np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def cross(a, b) -> Tensor:
    """Cross product over the last axis (size 3)."""
    a, b = astensor(a), astensor(b)
    av, bv = a.data, b.data
    return _record(np.cross(av, bv), (a, b),
                   lambda g: (_unbroadcast(np.cross(bv, g), av.shape),
                              _unbroadcast(np.cross(g, av), bv.shape)))


def norm1(a, axis=None) -> Tensor:
    a = astensor(a)
    s = np.sign(a.data)
    shape = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape) * s,)

    return _record(np.abs(a.data).sum(axis=axis), (a,), vjp)


def norm2(a, axis=None) -> Tensor:
    """Euclidean norm; gradient taken as 0 where the norm vanishes."""
    a = astensor(a)
    av = a.data
    n = np.sqrt((av * av).sum(axis=axis))

    def vjp(g):
        nn = n if axis is None else np.expand_dims(n, axis)
        gg = g if axis is None else np.expand_dims(g, axis)
        safe = np.where(nn > 0, nn, 1.0)
        return (np.where(nn > 0, gg * av / safe, 0.0),)

    return _record(n, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = astensor(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a, i, j) -> Tensor:
    a = astensor(a)
    return _record(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def _is_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def getitem(a, idx) -> Tensor:
    a = astensor(a)
    shape = a.shape

    fancy = _is_fancy(idx)

    def vjp(g):
        full = np.zeros(shape)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _record(a.data[idx], (a,), vjp)


def concat(items, axis=-1) -> Tensor:
    items = [astensor(t) for t in items]
    sizes = [t.shape[axis] for t in items]
    cuts = np.cumsum(sizes)[:-1]
    return _record(np.concatenate([t.data for t in items], axis=axis), tuple(items),
                   lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(items, axis=0) -> Tensor:
    items = [astensor(t) for t in items]

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return _record(np.stack([t.data for t in items], axis=axis), tuple(items), vjp)


def inv(a) -> Tensor:
    """Matrix inverse over the last two axes."""
    a = astensor(a)
    out = np.linalg.inv(a.data)

    def vjp(g):
        ot = np.swapaxes(out, -1, -2)
        return (-(ot @ g @ ot),)

    return _record(out, (a,), vjp)


# --- composites ----------------------------------------------------------------

def softmax(a, axis=-1) -> Tensor:
    a = astensor(a)
    shifted = a - np.max(a.data, axis=axis, keepdims=True)
    e = exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def linear(x, W, b=None) -> Tensor:
    out = matmul(x, W)
    return out if b is None else out + b
