"""Second stage: high-resolution targets plus reused background tokens."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .clustering import ClusterPartition
from .early_exit import StageOutcome, outcomes_from_probs
from .encoder import TokenSequence, _weights, class_row, classify, embed_patches, forward_stack
from .model import ModelConfig
from .numerics import MacCounter, ShapeError

TARGET, NONTARGET = 0, 1


@dataclass
class MixedSequence:
    """Class token, then 4M high-res targets, then N - M reused EE tokens."""

    sequence: TokenSequence
    cluster_mask: np.ndarray  # per patch row: TARGET or NONTARGET

    @property
    def num_rows(self) -> int:
        return self.sequence.tokens.shape[-2]


def _stack(partitions: Sequence[ClusterPartition], field: str) -> np.ndarray:
    return np.stack([getattr(p, field) for p in partitions])


def gather_high_res_targets(img, weights, cfg: ModelConfig, partitions: Sequence[ClusterPartition],
                            counter: MacCounter | None = None) -> Tensor:
    """Embed the full image once and pick each sample's mapped target rows, ``(B, 4M, D)``."""
    seq = embed_patches(img, cfg, weights, "high", counter)
    if len(partitions) != seq.tokens.shape[0]:
        raise ShapeError(f"{len(partitions)} partitions for a batch of {seq.tokens.shape[0]}")
    return ag.gather_rows(seq.tokens, _stack(partitions, "target_high") + 1)


def fuse_features(ee_targets: Tensor, high_targets: Tensor, weights, counter: MacCounter | None = None) -> Tensor:
    """Expand each EE target into four D-vectors (D -> 4D linear map) and add them."""
    w = _weights(weights)
    b, m, d = ee_targets.shape
    if high_targets.shape != (b, 4 * m, d):
        raise ShapeError(f"high-res targets {high_targets.shape} do not match 4x EE targets {ee_targets.shape}")
    expanded = ag.linear(ee_targets, w["fusion.weight"], w["fusion.bias"], counter, "fusion")
    return ag.add(high_targets, ag.reshape(expanded, (b, 4 * m, d)))


def build_mixed_sequence(img, weights, cfg: ModelConfig, ee_seq: TokenSequence,
                         partitions: Sequence[ClusterPartition], counter: MacCounter | None = None) -> MixedSequence:
    w = _weights(weights)
    high = gather_high_res_targets(img, w, cfg, partitions, counter)
    ee_targets = ag.gather_rows(ee_seq.tokens, _stack(partitions, "target_low") + 1)
    fused = fuse_features(ee_targets, high, w, counter)
    reused = ag.gather_rows(ee_seq.tokens, _stack(partitions, "nontarget_low") + 1)
    tokens = ag.concat([class_row(w, fused.shape[0]), fused, reused], axis=1)
    m4, rest = fused.shape[1], reused.shape[1]
    mask = np.concatenate([np.full(m4, TARGET), np.full(rest, NONTARGET)])
    return MixedSequence(TokenSequence(tokens, cfg.high_grid, "mixed"), mask)


def run_sac_stage(img, weights, cfg: ModelConfig, ee_seq: TokenSequence | None,
                  partitions: Sequence[ClusterPartition] | None,
                  counter: MacCounter | None = None) -> tuple[list[StageOutcome], Tensor]:
    """Run the second stage; ``partitions=None`` uses every high-res token in one cluster."""
    w = _weights(weights)
    if partitions is None:
        seq = embed_patches(img, cfg, w, "high", counter)
        mask = None
    else:
        mixed = build_mixed_sequence(img, w, cfg, ee_seq, partitions, counter)
        seq, mask = mixed.sequence, mixed.cluster_mask
    seq, _ = forward_stack(seq, w, cfg, mask=mask, counter=counter)
    logits = classify(seq, w, counter)
    return outcomes_from_probs(ag.softmax(logits).data, 1.0, "SAC"), logits
