"""Patch embedding and the pre-LN transformer encoder.

All functions operate on batches: token tensors are ``(B, n + 1, D)`` with
the class token in row 0. Attention restricted to clusters is computed by
gathering each cluster (plus a copy of the class token) and running dense
attention on it, so the MAC counter sees exactly the block-diagonal work.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .model import ModelConfig, ModelParams
from .numerics import MacCounter, ShapeError

# additive logit for pairs outside a cluster in the dense masked route
MASK_NEG = -1e9

Weights = Mapping[str, Tensor]


def as_tensors(params: ModelParams | Mapping[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


def _weights(w) -> Weights:
    if isinstance(w, ModelParams) or (w and not isinstance(next(iter(w.values())), Tensor)):
        return as_tensors(w)
    return w


@dataclass
class TokenSequence:
    tokens: Tensor
    grid: tuple[int, int]
    resolution: str  # "low", "high" or "mixed"

    @property
    def n_tokens(self) -> int:
        """Patch tokens, class token excluded."""
        return self.tokens.shape[-2] - 1

    def numpy(self) -> np.ndarray:
        return self.tokens.data


@dataclass
class AttentionTrace:
    """Per-layer class-attention rows plus their running moving average.

    Rows are ``(B, N)`` arrays: head-averaged attention from the class
    token to each patch token, with the class-to-class entry dropped.
    """

    beta: float
    per_layer_cls_rows: list[np.ndarray] = field(default_factory=list)
    running_avg: np.ndarray | None = None

    def append(self, row: np.ndarray) -> None:
        row = np.asarray(row)
        prev = np.zeros_like(row) if self.running_avg is None else self.running_avg
        self.running_avg = self.beta * prev + (1.0 - self.beta) * row
        self.per_layer_cls_rows.append(row)

    def __len__(self) -> int:
        return len(self.per_layer_cls_rows)

    def sample(self, b: int) -> "AttentionTrace":
        t = AttentionTrace(self.beta)
        for row in self.per_layer_cls_rows:
            t.append(row[b])
        return t


def _batched_image(img: np.ndarray) -> tuple[np.ndarray, bool]:
    img = np.asarray(img)
    if img.ndim == 3:
        return img[None], True
    if img.ndim != 4:
        raise ShapeError(f"expected a (C, H, W) image or a batch of them, got shape {img.shape}")
    return img, False


def patchify(img: np.ndarray, patch: int) -> np.ndarray:
    """``(B, C, H, W)`` -> ``(B, (H/P)(W/P), C*P*P)`` in row-major grid order."""
    b, c, h, w = img.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} is not a multiple of patch size {patch}")
    x = img.reshape(b, c, h // patch, patch, w // patch, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, (h // patch) * (w // patch), c * patch * patch)


def positional_rows(weights: Weights, cfg: ModelConfig, resolution: str) -> Tensor:
    """Patch positional embeddings; the low-res table is the 2x2 mean of the high-res grid."""
    gh, gw = cfg.high_grid
    pos = ag.gather_rows(weights["pos_embed"], np.arange(1, gh * gw + 1))
    if resolution == "high":
        return pos
    grid = ag.reshape(pos, (gh // 2, 2, gw // 2, 2, cfg.embed_dim))
    return ag.reshape(ag.mean(grid, axis=(1, 3)), (gh * gw // 4, cfg.embed_dim))


def class_row(weights: Weights, batch: int) -> Tensor:
    d = weights["cls_token"].shape[-1]
    cls = ag.add(weights["cls_token"], ag.reshape(ag.gather_rows(weights["pos_embed"], np.array([0])), (d,)))
    return ag.add(Tensor(np.zeros((batch, 1, d), dtype=cls.data.dtype)), cls)


def embed_patches(img, cfg: ModelConfig, weights, resolution: str, counter: MacCounter | None = None) -> TokenSequence:
    """Project patches, prepend the class token, add positional embeddings."""
    if resolution not in ("low", "high"):
        raise ValueError(f"resolution must be 'low' or 'high', got {resolution!r}")
    w = _weights(weights)
    batch, _ = _batched_image(img)
    H, W = cfg.image_hw
    want = (cfg.in_chans, H // 2, W // 2) if resolution == "low" else (cfg.in_chans, H, W)
    if batch.shape[1:] != want:
        raise ShapeError(f"{resolution}-res embedding expects images of shape {want}, got {batch.shape[1:]}")
    dtype = w["patch_embed.weight"].data.dtype
    patches = Tensor(patchify(batch.astype(dtype, copy=False), cfg.patch_size))
    x = ag.linear(patches, w["patch_embed.weight"], w["patch_embed.bias"], counter, "embed")
    x = ag.add(x, positional_rows(w, cfg, resolution))
    tokens = ag.concat([class_row(w, batch.shape[0]), x], axis=1)
    grid = cfg.low_grid if resolution == "low" else cfg.high_grid
    return TokenSequence(tokens, grid, resolution)


def mhsa(
    x: Tensor,
    w: Weights,
    prefix: str,
    num_heads: int,
    counter: MacCounter | None = None,
    bias: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray]:
    """Multi-head self-attention on ``(B, n, D)``; returns output and attention probs."""
    b, n, d = x.shape
    hd = d // num_heads

    def heads(t: Tensor) -> Tensor:
        return ag.transpose(ag.reshape(t, (b, n, num_heads, hd)), (0, 2, 1, 3))

    q = heads(ag.linear(x, w[prefix + "wq"], w[prefix + "bq"], counter, "attn.qkv"))
    k = heads(ag.linear(x, w[prefix + "wk"], w[prefix + "bk"], counter, "attn.qkv"))
    v = heads(ag.linear(x, w[prefix + "wv"], w[prefix + "bv"], counter, "attn.qkv"))
    logits = ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2)), counter, "attn.scores"), 1.0 / math.sqrt(hd))
    if bias is not None:
        logits = ag.add(logits, Tensor(bias.astype(logits.data.dtype)))
    attn = ag.softmax(logits)
    o = ag.matmul(attn, v, counter, "attn.av")
    o = ag.reshape(ag.transpose(o, (0, 2, 1, 3)), (b, n, d))
    return ag.linear(o, w[prefix + "wo"], w[prefix + "bo"], counter, "attn.proj"), attn.data


def _clusters(mask: np.ndarray) -> list[np.ndarray]:
    return [np.flatnonzero(mask == c) for c in np.unique(mask)]


def _merge_weights(groups: list[np.ndarray], merge: str) -> list[float]:
    if merge == "size":
        total = sum(len(g) for g in groups)
        return [len(g) / total for g in groups]
    return [1.0 / len(groups)] * len(groups)


def clustered_mhsa(
    x: Tensor, w: Weights, prefix: str, num_heads: int, mask: np.ndarray,
    counter: MacCounter | None = None, merge: str = "mean",
) -> Tensor:
    """Attention restricted to clusters of patch tokens.

    The class token is copied into every cluster, each copy attends within
    its cluster, and the copies are merged by a weighted average.
    """
    groups = _clusters(mask)
    cls_outs, patch_outs = [], []
    for idx in groups:
        sub = ag.gather_rows(x, np.concatenate([[0], idx + 1]))
        out, _ = mhsa(sub, w, prefix, num_heads, counter)
        cls_outs.append(ag.gather_rows(out, np.array([0])))
        patch_outs.append(ag.gather_rows(out, np.arange(1, len(idx) + 1)))
    order = np.concatenate(groups)
    patches = ag.gather_rows(ag.concat(patch_outs, axis=1), np.argsort(order, kind="stable"))
    cls = ag.weighted_sum(cls_outs, _merge_weights(groups, merge))
    return ag.concat([cls, patches], axis=1)


def clustered_mhsa_dense(
    x: Tensor, w: Weights, prefix: str, num_heads: int, mask: np.ndarray,
    counter: MacCounter | None = None, merge: str = "mean",
) -> Tensor:
    """Reference route for :func:`clustered_mhsa` using additive logit masking.

    Builds one sequence holding a class copy per cluster followed by that
    cluster's members and masks cross-cluster logits with ``MASK_NEG``.
    """
    groups = _clusters(mask)
    rows, cluster_of, starts = [], [], []
    for c, idx in enumerate(groups):
        starts.append(len(rows))
        rows.extend([0, *(idx + 1)])
        cluster_of.extend([c] * (len(idx) + 1))
    cluster_of = np.asarray(cluster_of)
    bias = np.where(cluster_of[:, None] == cluster_of[None, :], 0.0, MASK_NEG)
    out, _ = mhsa(ag.gather_rows(x, np.asarray(rows)), w, prefix, num_heads, counter, bias=bias)
    cls = ag.weighted_sum([ag.gather_rows(out, np.array([s])) for s in starts], _merge_weights(groups, merge))
    patch_pos = np.empty(len(mask), dtype=np.intp)
    for s, idx in zip(starts, groups):
        patch_pos[idx] = s + 1 + np.arange(len(idx))
    return ag.concat([cls, ag.gather_rows(out, patch_pos)], axis=1)


def _check_mask(mask: np.ndarray | None, n_tokens: int) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask)
    if mask.shape != (n_tokens,):
        raise ShapeError(f"cluster mask has shape {mask.shape}, expected ({n_tokens},)")
    return mask


def encoder_layer(
    seq: TokenSequence,
    weights,
    layer: int,
    cfg: ModelConfig,
    mask: np.ndarray | None = None,
    trace: AttentionTrace | None = None,
    counter: MacCounter | None = None,
    impl: str = "gather",
) -> TokenSequence:
    """One pre-LN block: ``x + MHSA(LN(x))`` then ``x + FFN(LN(x))``.

    ``mask`` gives a cluster id per patch token (class token excluded).
    ``impl="dense"`` selects the additive-mask reference route.
    """
    w = _weights(weights)
    p = f"blocks.{layer}."
    x = seq.tokens
    mask = _check_mask(mask, seq.n_tokens)
    single = mask is None or len(np.unique(mask)) == 1
    h = ag.layer_norm(x, w[p + "ln1.gain"], w[p + "ln1.bias"])
    if single:
        a, probs = mhsa(h, w, p + "attn.", cfg.num_heads, counter)
        if trace is not None:
            trace.append(probs[:, :, 0, 1:].mean(axis=1))
    else:
        if trace is not None:
            raise ValueError("class-attention tracing is only defined for unmasked layers")
        fn = clustered_mhsa if impl == "gather" else clustered_mhsa_dense
        a = fn(h, w, p + "attn.", cfg.num_heads, mask, counter, cfg.class_token_merge)
    x = ag.add(x, a)
    h = ag.layer_norm(x, w[p + "ln2.gain"], w[p + "ln2.bias"])
    f = ag.gelu(ag.linear(h, w[p + "ffn.w1"], w[p + "ffn.b1"], counter, "ffn"))
    f = ag.linear(f, w[p + "ffn.w2"], w[p + "ffn.b2"], counter, "ffn")
    return TokenSequence(ag.add(x, f), seq.grid, seq.resolution)


def forward_stack(
    seq: TokenSequence,
    weights,
    cfg: ModelConfig,
    mask: np.ndarray | None = None,
    trace: AttentionTrace | None = None,
    counter: MacCounter | None = None,
) -> tuple[TokenSequence, AttentionTrace | None]:
    w = _weights(weights)
    for layer in range(cfg.depth):
        seq = encoder_layer(seq, w, layer, cfg, mask, trace, counter)
    return seq, trace


def classify(seq: TokenSequence, weights, counter: MacCounter | None = None) -> Tensor:
    """Logits ``(B, C)`` from the final class token."""
    w = _weights(weights)
    d = seq.tokens.shape[-1]
    cls = ag.reshape(ag.gather_rows(seq.tokens, np.array([0])), (seq.tokens.shape[0], d))
    cls = ag.layer_norm(cls, w["norm.gain"], w["norm.bias"])
    return ag.linear(cls, w["head.weight"], w["head.bias"], counter, "head")


def probabilities(logits: Tensor) -> Tensor:
    return ag.softmax(logits)

