"""Target/non-target token selection and the low-to-high resolution index map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import AttentionTrace
from .model import ModelConfig, target_count


class PartitionError(RuntimeError):
    """A partition violated its own invariants; indicates a bug upstream."""


@dataclass(frozen=True)
class ClusterPartition:
    target_low: np.ndarray      # (M,) sorted low-res patch indices
    target_high: np.ndarray     # (4M,) high-res indices, four per target in TL, TR, BL, BR order
    nontarget_low: np.ndarray   # (N - M,) sorted

    @property
    def num_targets(self) -> int:
        return len(self.target_low)

    def validate(self, n_low: int) -> None:
        t, nt = self.target_low, self.nontarget_low
        if len(np.intersect1d(t, nt)) or not np.array_equal(np.union1d(t, nt), np.arange(n_low)):
            raise PartitionError("target and non-target sets must partition 0..N-1")
        if np.any(np.diff(t) <= 0) or np.any(np.diff(nt) <= 0):
            raise PartitionError("index lists must be strictly increasing")
        th = self.target_high
        if len(th) != 4 * len(t) or len(np.unique(th)) != len(th):
            raise PartitionError("high-res targets must be 4M distinct indices")
        if th.size and (th.min() < 0 or th.max() >= 4 * n_low):
            raise PartitionError("high-res target index out of range")


def moving_average_scores(trace: AttentionTrace, beta: float) -> np.ndarray:
    """Exponential moving average of class attention over layers, started at zero."""
    if len(trace) == 0:
        raise ValueError("attention trace is empty")
    avg = np.zeros_like(trace.per_layer_cls_rows[0], dtype=np.float64)
    for row in trace.per_layer_cls_rows:
        avg = beta * avg + (1.0 - beta) * row
    return avg


def select_targets(scores: np.ndarray, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the top ``floor(alpha * N)`` scores (ties to the lower index) and the rest."""
    scores = np.asarray(scores)
    if scores.ndim != 1 or scores.size < 2:
        raise ValueError(f"need a score vector with at least 2 entries, got shape {scores.shape}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    n = scores.size
    m = target_count(alpha, n)
    ranked = np.argsort(-scores, kind="stable")
    return np.sort(ranked[:m]), np.sort(ranked[m:])


def map_to_high_res(i: int, grid: tuple[int, int, int]) -> tuple[int, int, int, int]:
    """Four full-resolution patch indices covering low-res patch ``i``.

    ``grid`` is ``(H, W, P)`` of the full-resolution image. The low-res row
    width ``W // 2P`` serves as both modulus and stride, which reduces to
    the usual square-grid formula when ``H == W``.
    """
    H, W, P = grid
    w1 = W // (2 * P)
    n = (H // (2 * P)) * w1
    if not 0 <= i < n:
        raise ValueError(f"low-res index {i} outside 0..{n - 1}")
    top_left = 4 * i - 2 * (i % w1)
    return top_left, top_left + 1, top_left + 2 * w1, top_left + 2 * w1 + 1


def map_indices(low: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Vectorised :func:`map_to_high_res`, flattened in source order."""
    low = np.asarray(low, dtype=np.intp)
    w1 = cfg.low_grid[1]
    top_left = 4 * low - 2 * (low % w1)
    return np.stack([top_left, top_left + 1, top_left + 2 * w1, top_left + 2 * w1 + 1], axis=-1).reshape(-1)


def partition_from_scores(scores: np.ndarray, cfg: ModelConfig) -> ClusterPartition:
    target, rest = select_targets(scores, cfg.alpha)
    part = ClusterPartition(target, map_indices(target, cfg), rest)
    part.validate(cfg.num_low_tokens)
    return part


def build_partition(trace: AttentionTrace, cfg: ModelConfig) -> ClusterPartition:
    """Partition for a single-sample trace (rows of shape ``(N,)``)."""
    return partition_from_scores(moving_average_scores(trace, cfg.beta), cfg)


def build_partitions(trace: AttentionTrace, cfg: ModelConfig) -> list[ClusterPartition]:
    """One partition per sample of a batched trace (rows of shape ``(B, N)``)."""
    scores = moving_average_scores(trace, cfg.beta)
    return [partition_from_scores(s, cfg) for s in np.atleast_2d(scores)]
