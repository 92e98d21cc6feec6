"""Low-resolution first stage and the confidence-threshold exit rule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoder import AttentionTrace, TokenSequence, _batched_image, _weights, classify, embed_patches, forward_stack
from .model import ModelConfig
from .numerics import MacCounter, ShapeError, avg_pool_2x2


@dataclass(frozen=True)
class StageOutcome:
    distribution: np.ndarray
    predicted: int
    confidence: float
    exited: bool
    stage: str  # "EE" or "SAC"


def decide_exit(p, eta: float) -> tuple[int, float, bool]:
    """Argmax (lowest index wins ties) and whether its probability beats ``eta``."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("probability vector must be 1-D and non-empty")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-4:
        raise ValueError("not a probability distribution")
    j = int(np.argmax(p))
    return j, float(p[j]), bool(p[j] > eta)


def outcomes_from_probs(probs: np.ndarray, eta: float, stage: str) -> list[StageOutcome]:
    """Per-sample outcomes; a SAC outcome always terminates inference."""
    out = []
    for p in probs:
        j, pj, exited = decide_exit(p, eta)
        out.append(StageOutcome(p, j, pj, exited if stage == "EE" else True, stage))
    return out


@dataclass
class EEResult:
    outcomes: list[StageOutcome]
    sequence: TokenSequence
    trace: AttentionTrace
    logits: Tensor


def downsample(img: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    batch, _ = _batched_image(img)
    want = (cfg.in_chans, *cfg.image_hw)
    if batch.shape[1:] != want:
        raise ShapeError(f"expected full-resolution images of shape {want}, got {batch.shape[1:]}")
    return avg_pool_2x2(batch)


def run_ee_stage(img, weights, cfg: ModelConfig, eta: float | None = None,
                 counter: MacCounter | None = None) -> EEResult:
    """Downsample, encode, classify, and decide exits for a batch (or one image)."""
    w = _weights(weights)
    eta = cfg.eta if eta is None else eta
    seq = embed_patches(downsample(img, cfg), cfg, w, "low", counter)
    trace = AttentionTrace(cfg.beta)
    seq, _ = forward_stack(seq, w, cfg, trace=trace, counter=counter)
    logits = classify(seq, w, counter)
    probs = ag.softmax(logits).data
    return EEResult(outcomes_from_probs(probs, eta, "EE"), seq, trace, logits)
