"""Reverse-mode automatic differentiation on numpy arrays.

A :class:`Tape` records every primitive operation of one forward evaluation;
replaying it backward accumulates gradients for all leaves that were touched.
The primitive set is deliberately small: elementwise arithmetic with numpy
broadcasting, 2-D matrix products, reductions, shape moves, slicing, and the
three activations used by the networks.  All primitives accept either a
:class:`Var` or a plain array/scalar; with no :class:`Var` among the operands
they fall through to numpy, so the same formula code runs in both recorded
and plain-numeric mode.

One tape is single-threaded; independent tapes may run on separate threads.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from dissipnet.errors import TapeMismatch


def value_of(x) -> np.ndarray:
    """Underlying numpy value of a Var, array, or scalar."""
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=float)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Var:
    """Handle to one recorded value on a tape."""

    __slots__ = ("value", "tape", "idx")
    __array_ufunc__ = None  # make ndarray defer to our reflected operators

    def __init__(self, value: np.ndarray, tape: "Tape", idx: int):
        self.value = value
        self.tape = tape
        self.idx = idx

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, idx={self.idx})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __rtruediv__(self, other):
        return divide(other, self)

    def __neg__(self):
        return negative(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return take(self, idx)


class Tape:
    """Operation recorder for one forward pass."""

    def __init__(self):
        self._values: list[np.ndarray] = []
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._params: dict = {}
        self._param_order: list = []

    def __len__(self):
        return len(self._values)

    def _push(self, value, parents=(), vjp=None) -> Var:
        value = np.asarray(value, dtype=float)
        self._values.append(value)
        self._parents.append(parents)
        self._vjps.append(vjp)
        return Var(value, self, len(self._values) - 1)

    def var(self, value) -> Var:
        """Record a leaf value."""
        return self._push(value)

    def param(self, key, value) -> Var:
        """Leaf cached by ``key``: repeated lookups return the same node."""
        if key not in self._params:
            self._params[key] = self.var(value)
            self._param_order.append(key)
        return self._params[key]

    @property
    def last(self) -> Var:
        if not self._values:
            raise TapeMismatch("tape has recorded nothing")
        idx = len(self._values) - 1
        return Var(self._values[idx], self, idx)

    def _adjoints(self, output: Var, seed) -> list:
        if output.tape is not self:
            raise TapeMismatch("output was recorded on a different tape")
        seed = np.asarray(seed, dtype=float)
        if seed.shape != output.value.shape:
            seed = np.broadcast_to(seed, output.value.shape).astype(float)
        adj: list = [None] * len(self._values)
        adj[output.idx] = seed.copy()
        for idx in range(output.idx, -1, -1):
            g = adj[idx]
            if g is None:
                continue
            vjp = self._vjps[idx]
            if vjp is None:
                continue
            for parent, pg in zip(self._parents[idx], vjp(g)):
                if pg is None:
                    continue
                if adj[parent] is None:
                    adj[parent] = pg
                else:
                    adj[parent] = adj[parent] + pg
        return adj

    def grads(self, output: Var, seed, wrt: Sequence[Var]) -> list[np.ndarray]:
        """Gradients of ``<seed, output>`` for each leaf in ``wrt``."""
        adj = self._adjoints(output, seed)
        out = []
        for v in wrt:
            if v.tape is not self:
                raise TapeMismatch("wrt variable from a different tape")
            g = adj[v.idx]
            out.append(np.zeros_like(v.value) if g is None else g)
        return out

    def grad_params(self, cotangent, output: Var | None = None) -> np.ndarray:
        """Flat gradient over all registered parameter leaves, in order."""
        if output is None:
            output = self.last
        leaves = [self._params[k] for k in self._param_order]
        gs = self.grads(output, cotangent, leaves)
        if not gs:
            return np.zeros(0)
        return np.concatenate([g.ravel() for g in gs])


def _binary(a, b, fwd, vjp_maker):
    av, bv = value_of(a), value_of(b)
    tape = None
    for x in (a, b):
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise TapeMismatch("operands recorded on different tapes")
            tape = x.tape
    if tape is None:
        return fwd(av, bv)
    parents, picks = [], []
    for x in (a, b):
        if isinstance(x, Var):
            parents.append(x.idx)
            picks.append(True)
        else:
            picks.append(False)
    out = fwd(av, bv)
    vjp_full = vjp_maker(av, bv, out)

    def vjp(g):
        ga, gb = vjp_full(g)
        both = [ga, gb]
        return tuple(both[i] for i in (0, 1) if picks[i])

    return tape._push(out, tuple(parents), vjp)


def _unary(a, fwd, vjp_maker):
    av = value_of(a)
    if not isinstance(a, Var):
        return fwd(av)
    out = fwd(av)
    vjp_full = vjp_maker(av, out)
    return a.tape._push(out, (a.idx,), lambda g: (vjp_full(g),))


def add(a, b):
    return _binary(
        a, b, np.add,
        lambda av, bv, out: lambda g: (
            _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)),
    )


def subtract(a, b):
    return _binary(
        a, b, np.subtract,
        lambda av, bv, out: lambda g: (
            _unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)),
    )


def multiply(a, b):
    return _binary(
        a, b, np.multiply,
        lambda av, bv, out: lambda g: (
            _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def divide(a, b):
    return _binary(
        a, b, np.divide,
        lambda av, bv, out: lambda g: (
            _unbroadcast(g / bv, av.shape),
            _unbroadcast(-g * av / (bv * bv), bv.shape)),
    )


def negative(a):
    return _unary(a, np.negative, lambda av, out: lambda g: -g)


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError("taped matmul is restricted to 2-D operands")
    return _binary(
        a, b, np.matmul,
        lambda av, bv, out: lambda g: (g @ bv.T, av.T @ g),
    )


def sum_(a, axis=None, keepdims=False):
    def vjp_maker(av_, out):
        def vjp(g):
            if axis is None:
                return np.broadcast_to(g, av_.shape).astype(float)
            gg = g if keepdims else np.expand_dims(g, axis)
            return np.broadcast_to(gg, av_.shape).astype(float)
        return vjp

    return _unary(a, lambda x: np.sum(x, axis=axis, keepdims=keepdims), vjp_maker)


def mean_(a, axis=None, keepdims=False):
    av = value_of(a)
    if axis is None:
        denom = av.size
    else:
        denom = av.shape[axis]
    return divide(sum_(a, axis=axis, keepdims=keepdims), float(denom))


def reshape(a, shape):
    return _unary(
        a, lambda x: np.reshape(x, shape),
        lambda av, out: lambda g: g.reshape(av.shape),
    )


def swapaxes(a, ax1, ax2):
    return _unary(
        a, lambda x: np.swapaxes(x, ax1, ax2),
        lambda av, out: lambda g: np.swapaxes(g, ax1, ax2),
    )


def take(a, idx):
    def vjp_maker(av, out):
        def vjp(g):
            z = np.zeros_like(av)
            np.add.at(z, idx, g)
            return z
        return vjp

    return _unary(a, lambda x: x[idx], vjp_maker)


def concat(parts, axis=0):
    vals = [value_of(p) for p in parts]
    tape = None
    for p in parts:
        if isinstance(p, Var):
            tape = p.tape
            break
    if tape is None:
        return np.concatenate(vals, axis=axis)
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    parents, picks = [], []
    for p in parts:
        if isinstance(p, Var):
            if p.tape is not tape:
                raise TapeMismatch("operands recorded on different tapes")
            parents.append(p.idx)
            picks.append(True)
        else:
            picks.append(False)

    def vjp(g):
        slabs = []
        for i in range(len(vals)):
            if not picks[i]:
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            slabs.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(slabs)

    return tape._push(out, tuple(parents), vjp)


def relu(a):
    return _unary(
        a, lambda x: np.maximum(x, 0.0),
        lambda av, out: lambda g: g * (av > 0.0),
    )


def leaky_relu(a, slope=0.01):
    return _unary(
        a, lambda x: np.where(x > 0.0, x, slope * x),
        lambda av, out: lambda g: g * np.where(av > 0.0, 1.0, slope),
    )


def sigmoid(a):
    return _unary(
        a, lambda x: 1.0 / (1.0 + np.exp(-x)),
        lambda av, out: lambda g: g * out * (1.0 - out),
    )


def clip_min(a, floor: float):
    """Elementwise ``max(a, floor)``; gradient passes where ``a >= floor``."""
    return _unary(
        a, lambda x: np.maximum(x, floor),
        lambda av, out: lambda g: g * (av >= floor),
    )
