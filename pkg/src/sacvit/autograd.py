"""Minimal reverse-mode differentiation over numpy arrays.

Only the handful of primitives the model needs are defined. A result keeps
its parents and a backward closure only when some input requires a
gradient, so inference over plain parameters builds no graph at all.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import numerics
from .numerics import MacCounter, ShapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a = _wrap(a)
    if not isinstance(b, Tensor):
        s = b
        return _make(a.data * s, (a,), lambda g: (g * s,))
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a: Tensor, b: Tensor, counter: MacCounter | None = None, label: str = "matmul") -> Tensor:
    out = numerics.matmul(a.data, b.data, counter, label)

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga if ga is None else _unbroadcast(ga, a.shape), gb

    return _make(out, (a, b), back)


def linear(x: Tensor, w: Tensor, b: Tensor, counter: MacCounter | None = None, label: str = "linear") -> Tensor:
    return add(matmul(x, w, counter, label), b)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def softmax(a: Tensor) -> Tensor:
    s = numerics.softmax_rows(a.data)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (a,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    if gain.shape[-1] != x.shape[-1]:
        raise ShapeError(f"layer_norm gain {gain.shape} does not match width {x.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make(out, (x, gain, bias), back)


def gelu(x: Tensor) -> Tensor:
    return _make(numerics.gelu(x.data), (x,), lambda g: (g * numerics.gelu_grad(x.data),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(data, tuple(parts), back)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis -2 of ``(B, n, D)``.

    ``idx`` is either shared ``(k,)`` or per-sample ``(B, k)``.
    """
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim == 1:
        out = a.data[..., idx, :]
    else:
        out = np.take_along_axis(a.data, idx[..., None], axis=-2)

    def back(g):
        ga = np.zeros_like(a.data)
        if idx.ndim == 1:
            np.add.at(ga, (Ellipsis, idx, slice(None)), g)
        else:
            b = np.arange(idx.shape[0])[:, None]
            np.add.at(ga, (b, idx), g)
        return (ga,)

    return _make(out, (a,), back)


def mean(a: Tensor, axis, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.data.ndim for ax in axes)
    count = int(np.prod([a.shape[ax] for ax in axes]))

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape) / count,)

    return _make(out, (a,), back)


def weighted_sum(parts: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    out = sum(w * p.data for p, w in zip(parts, weights))
    return _make(out, tuple(parts), lambda g: tuple(g * w for w in weights))


def log_clamped(p: Tensor, eps: float) -> Tensor:
    clamped = np.maximum(p.data, eps)
    return _make(np.log(clamped), (p,), lambda g: (np.where(p.data > eps, g / clamped, 0.0),))


def total(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
