"""Dense tensor kernels with optional multiply-accumulate accounting.

Kernels take numpy arrays of shape ``(..., rows, cols)`` so the same code
serves single samples and batches. Only :func:`matmul` charges a
:class:`MacCounter`; softmax, normalization, activations and pooling are
free under the accounting convention (1 MAC == 1 reported FLOP).
"""

from __future__ import annotations

import contextlib
import math
from collections import defaultdict
from typing import Iterator

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


_DTYPES = {"f32": np.float32, "f64": np.float64}
_default_dtype: type = np.float32


def get_dtype() -> type:
    return _default_dtype


def set_precision(name: str) -> None:
    """Select the global default float type, ``"f32"`` or ``"f64"``."""
    global _default_dtype
    try:
        _default_dtype = _DTYPES[name]
    except KeyError:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}") from None


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    global _default_dtype
    prev = _default_dtype
    set_precision(name)
    try:
        yield
    finally:
        _default_dtype = prev


class MacCounter:
    """Tally of multiply-accumulates, broken down by label.

    Labels are joined with the active scope prefixes, so stage code can
    write ``with counter.scope("ee"): ...`` and have ``attn.qkv`` recorded
    as ``ee.attn.qkv``.
    """

    def __init__(self) -> None:
        self.per_label: dict[str, int] = defaultdict(int)
        self._prefix: list[str] = []

    @property
    def total_macs(self) -> int:
        return sum(self.per_label.values())

    def add(self, label: str, macs: int) -> None:
        if macs < 0:
            raise ValueError("MAC count must be non-negative")
        key = ".".join([*self._prefix, label]) if self._prefix else label
        self.per_label[key] += int(macs)

    @contextlib.contextmanager
    def scope(self, prefix: str) -> Iterator["MacCounter"]:
        self._prefix.append(prefix)
        try:
            yield self
        finally:
            self._prefix.pop()

    def as_dict(self) -> dict[str, int]:
        return dict(sorted(self.per_label.items()))

    def __repr__(self) -> str:
        return f"MacCounter(total_macs={self.total_macs})"


def matmul_macs(a_shape: tuple[int, ...], b_shape: tuple[int, ...]) -> int:
    """MACs of ``a @ b`` including any broadcast batch dimensions."""
    batch = np.broadcast_shapes(a_shape[:-2], b_shape[:-2]) if len(a_shape) > 2 or len(b_shape) > 2 else ()
    return math.prod(batch) * a_shape[-2] * a_shape[-1] * b_shape[-1]


def matmul(a: np.ndarray, b: np.ndarray, counter: MacCounter | None = None, label: str = "matmul") -> np.ndarray:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a, b)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    if counter is not None:
        counter.add(label, matmul_macs(a.shape, b.shape))
    return out


def softmax_rows(a: np.ndarray) -> np.ndarray:
    shifted = a - a.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ShapeError(f"layer_norm affine params {gain.shape}/{bias.shape} do not match width {x.shape[-1]}")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


# tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x**3)))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    u = GELU_C * (x + GELU_A * x**3)
    t = np.tanh(u)
    du = GELU_C * (1.0 + 3.0 * GELU_A * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du


def avg_pool_2x2(img: np.ndarray) -> np.ndarray:
    """Mean-pool the last two (spatial) axes by a factor of two.

    Works on ``(C, H, W)`` images, batches thereof, and ``(H, W, D)``
    grids when called through :func:`pool_grid_2x2`.
    """
    if img.ndim < 2:
        raise ShapeError(f"pooling needs a spatial tensor, got shape {img.shape}")
    h, w = img.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"pooling needs even spatial dims, got {h}x{w}")
    r = img.reshape(*img.shape[:-2], h // 2, 2, w // 2, 2)
    return r.mean(axis=(-3, -1))


def pool_grid_2x2(grid: np.ndarray) -> np.ndarray:
    """Mean-pool an ``(..., H, W, D)`` feature grid over its spatial axes."""
    h, w = grid.shape[-3:-1]
    if h % 2 or w % 2:
        raise ShapeError(f"pooling needs even spatial dims, got {h}x{w}")
    r = grid.reshape(*grid.shape[:-3], h // 2, 2, w // 2, 2, grid.shape[-1])
    return r.mean(axis=(-4, -2))


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x
