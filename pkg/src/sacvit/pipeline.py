"""Adaptive two-stage inference over a batch of images."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .autograd import Tensor
from .clustering import build_partitions
from .early_exit import StageOutcome, run_ee_stage
from .encoder import TokenSequence, _weights
from .model import ModelConfig
from .numerics import MacCounter
from .sac import run_sac_stage


def infer(images: np.ndarray, weights, cfg: ModelConfig, eta: float | None = None,
          counter: MacCounter | None = None) -> list[StageOutcome]:
    """EE stage on every image; SAC stage only for those that did not exit.

    Results keep input order.
    """
    w = _weights(weights)
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    ee = run_ee_stage(images, w, cfg, eta, counter)
    results: list[StageOutcome] = list(ee.outcomes)
    pending = np.array([i for i, o in enumerate(ee.outcomes) if not o.exited], dtype=np.intp)
    if pending.size:
        trace = ee.trace
        sub_trace = type(trace)(trace.beta, [r[pending] for r in trace.per_layer_cls_rows])
        parts = build_partitions(sub_trace, cfg)
        sub_seq = TokenSequence(Tensor(ee.sequence.tokens.data[pending]), ee.sequence.grid, ee.sequence.resolution)
        sac, _ = run_sac_stage(images[pending], w, cfg, sub_seq, parts, counter)
        for i, o in zip(pending, sac):
            results[i] = o
    return results


def worker_count() -> int:
    """Worker cap from ``SACVIT_THREADS`` (0 or unset means one per CPU)."""
    raw = os.environ.get("SACVIT_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"SACVIT_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError("SACVIT_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def infer_chunked(images: np.ndarray, weights, cfg: ModelConfig, eta: float | None = None,
                  chunk: int = 64, workers: int | None = None) -> list[StageOutcome]:
    """:func:`infer` over fixed-size chunks, fanned out to a thread pool.

    Chunk boundaries do not depend on the worker count, so results are
    identical for any ``workers``.
    """
    w = _weights(weights)
    workers = worker_count() if workers is None else workers
    pieces = [images[i:i + chunk] for i in range(0, len(images), chunk)]
    if workers <= 1 or len(pieces) <= 1:
        results = [infer(p, w, cfg, eta) for p in pieces]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda p: infer(p, w, cfg, eta), pieces))
    return [o for r in results for o in r]
