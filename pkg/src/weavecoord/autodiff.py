"""Minimal reverse-mode differentiation tape on numpy arrays.

The network code in this package is written once against the dispatching
helpers below: pass plain ndarrays and everything runs as fast numpy, pass
``Tensor`` leaves and the same code builds a tape whose ``backward`` yields
exact gradients.  Only the operations the coordination network needs are
implemented, every value is float64, and broadcasting follows numpy rules
with gradients summed back onto the original shapes.
"""

from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node of the tape: a value, accumulated gradient, and a vjp closure."""

    __slots__ = ("value", "grad", "_parents", "_vjp")

    # Force numpy to defer mixed ndarray/Tensor arithmetic to our reflected
    # operators instead of broadcasting over the object.
    __array_ufunc__ = None

    def __init__(self, value, _parents=(), _vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def backward(self, seed=None) -> None:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.value) if seed is None else np.asarray(seed, dtype=np.float64)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None:
                    continue
                g = _unbroadcast(g, parent.value.shape)
                parent.grad = g if parent.grad is None else parent.grad + g

    # ---- operators -------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        o = self._coerce(other)
        return Tensor(self.value + o.value, (self, o), lambda g: (g, g))

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        o = self._coerce(other)
        return Tensor(self.value - o.value, (self, o), lambda g: (g, -g))

    def __rsub__(self, other):
        o = self._coerce(other)
        return Tensor(o.value - self.value, (self, o), lambda g: (-g, g))

    def __mul__(self, other):
        o = self._coerce(other)
        return Tensor(self.value * o.value, (self, o), lambda g, a=self.value, b=o.value: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._coerce(other)
        return Tensor(
            self.value / o.value,
            (self, o),
            lambda g, a=self.value, b=o.value: (g / b, -g * a / (b * b)),
        )

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __matmul__(self, other):
        o = self._coerce(other)
        return Tensor(
            self.value @ o.value,
            (self, o),
            lambda g, a=self.value, b=o.value: (g @ b.T, a.T @ g),
        )

    def __rmatmul__(self, other):
        return self._coerce(other) @ self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only constant exponents are supported")
        e = float(exponent)
        return Tensor(
            self.value**e,
            (self,),
            lambda g, a=self.value: (g * e * a ** (e - 1.0),),
        )

    def __getitem__(self, idx):
        # Basic slicing only; use take_rows/take_slots for integer gathers.
        def vjp(g, idx=idx, shape=self.value.shape):
            out = np.zeros(shape, dtype=np.float64)
            out[idx] += g
            return (out,)

        return Tensor(self.value[idx], (self,), vjp)


# ---- dispatching helpers --------------------------------------------------


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def val(x):
    """Raw ndarray behind either backend."""
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def tanh(x):
    if not isinstance(x, Tensor):
        return np.tanh(x)
    y = np.tanh(x.value)
    return Tensor(y, (x,), lambda g, y=y: (g * (1.0 - y * y),))


def _sigmoid_np(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x):
    if not isinstance(x, Tensor):
        return _sigmoid_np(x)
    y = _sigmoid_np(x.value)
    return Tensor(y, (x,), lambda g, y=y: (g * y * (1.0 - y),))


def _softplus_np(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(x):
    if not isinstance(x, Tensor):
        return _softplus_np(x)
    y = _softplus_np(x.value)
    return Tensor(y, (x,), lambda g, s=_sigmoid_np(x.value): (g * s,))


def exp(x):
    if not isinstance(x, Tensor):
        return np.exp(x)
    y = np.exp(x.value)
    return Tensor(y, (x,), lambda g, y=y: (g * y,))


def log(x):
    if not isinstance(x, Tensor):
        return np.log(x)
    return Tensor(np.log(x.value), (x,), lambda g, a=x.value: (g / a,))


def sum_(x, axis=None, keepdims=False):
    if not isinstance(x, Tensor):
        return np.sum(x, axis=axis, keepdims=keepdims)
    y = np.sum(x.value, axis=axis, keepdims=keepdims)

    def vjp(g, axis=axis, keepdims=keepdims, shape=x.value.shape):
        g = np.asarray(g, dtype=np.float64)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(y, (x,), vjp)


def reshape(x, shape):
    if not isinstance(x, Tensor):
        return np.reshape(x, shape)
    old = x.value.shape
    return Tensor(np.reshape(x.value, shape), (x,), lambda g, old=old: (np.reshape(g, old),))


def concat(parts, axis=-1):
    if not any(isinstance(p, Tensor) for p in parts):
        return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts], axis=axis)
    tensors = [p if isinstance(p, Tensor) else Tensor(p) for p in parts]
    sizes = [t.value.shape[axis] for t in tensors]
    y = np.concatenate([t.value for t in tensors], axis=axis)

    def vjp(g, sizes=sizes, axis=axis):
        splits = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(y, tuple(tensors), vjp)


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    if not (isinstance(a, Tensor) or isinstance(b, Tensor)):
        return np.where(cond, a, b)
    ta = a if isinstance(a, Tensor) else Tensor(a)
    tb = b if isinstance(b, Tensor) else Tensor(b)
    y = np.where(cond, ta.value, tb.value)
    return Tensor(
        y,
        (ta, tb),
        lambda g, c=cond: (np.where(c, g, 0.0), np.where(c, 0.0, g)),
    )


def take_rows(x, idx):
    """Gather along axis 0 with an integer index array."""
    idx = np.asarray(idx, dtype=int)
    if not isinstance(x, Tensor):
        return np.asarray(x, dtype=np.float64)[idx]

    def vjp(g, idx=idx, shape=x.value.shape):
        out = np.zeros(shape, dtype=np.float64)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(x.value[idx], (x,), vjp)


def take_slots(x, idx):
    """Batched gather along axis 1: x is (B, M, ...), idx is (B, K)."""
    idx = np.asarray(idx, dtype=int)
    rows = np.arange(idx.shape[0])[:, None]
    if not isinstance(x, Tensor):
        return np.asarray(x, dtype=np.float64)[rows, idx]

    def vjp(g, idx=idx, rows=rows, shape=x.value.shape):
        out = np.zeros(shape, dtype=np.float64)
        np.add.at(out, (rows, idx), g)
        return (out,)

    return Tensor(x.value[rows, idx], (x,), vjp)


def detach(x):
    return x.detach() if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
