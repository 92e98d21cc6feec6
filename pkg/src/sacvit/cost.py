"""Closed-form MAC accounting and its cross-check against instrumented runs.

Convention: one multiply-accumulate counts as one FLOP, and only matrix
products are counted. The full-accounting figures include the class token,
FFN, patch embedding, fusion map and classifier; the ``attention_only``
block holds the bare attention formulas without those terms.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ModelConfig, ModelParams, init_params

ATTN_LABELS = ("attn.qkv", "attn.scores", "attn.av", "attn.proj")


def mhsa_macs(n: int, d: int) -> int:
    return 4 * n * d * d + 2 * n * n * d


def ffn_macs(n: int, d: int, ratio: int = 4) -> int:
    return 2 * ratio * n * d * d


def macs_vanilla_vit(n_tokens: int, embed_dim: int, depth: int, *, n_patches: int = 0,
                     patch_dim: int = 0, num_classes: int = 0, ffn_ratio: int = 4) -> int:
    """Plain ViT cost with ``n_tokens`` rows (class token included)."""
    layer = mhsa_macs(n_tokens, embed_dim) + ffn_macs(n_tokens, embed_dim, ffn_ratio)
    return depth * layer + n_patches * embed_dim * patch_dim + embed_dim * num_classes


def vanilla_for_image(cfg: ModelConfig, image_hw: tuple[int, int]) -> int:
    """Plain ViT cost for ``cfg``'s backbone at an arbitrary input size."""
    n_patches = (image_hw[0] // cfg.patch_size) * (image_hw[1] // cfg.patch_size)
    return macs_vanilla_vit(n_patches + 1, cfg.embed_dim, cfg.depth, n_patches=n_patches,
                            patch_dim=cfg.patch_dim, num_classes=cfg.num_classes, ffn_ratio=cfg.ffn_ratio)


def _layer_breakdown(cluster_sizes: list[int], n_rows: int, d: int, ratio: int) -> dict[str, int]:
    return {
        "attn.qkv": sum(3 * n * d * d for n in cluster_sizes),
        "attn.scores": sum(n * n * d for n in cluster_sizes),
        "attn.av": sum(n * n * d for n in cluster_sizes),
        "attn.proj": sum(n * d * d for n in cluster_sizes),
        "ffn": ffn_macs(n_rows, d, ratio),
    }


def analytic_breakdown(cfg: ModelConfig, clustered: bool = True) -> dict[str, int]:
    """Per-label MACs of one sample running both stages.

    Labels match the instrumented counter, e.g. ``ee.attn.qkv``.
    """
    d, depth, n, m = cfg.embed_dim, cfg.depth, cfg.num_low_tokens, cfg.num_targets
    out: dict[str, int] = {"ee.embed": n * d * cfg.patch_dim, "ee.head": d * cfg.num_classes}
    for k, v in _layer_breakdown([n + 1], n + 1, d, cfg.ffn_ratio).items():
        out["ee." + k] = depth * v
    out["sac.embed"] = 4 * n * d * cfg.patch_dim
    out["sac.head"] = d * cfg.num_classes
    if clustered:
        out["sac.fusion"] = m * d * 4 * d
        layer = _layer_breakdown([4 * m + 1, n - m + 1], 4 * m + (n - m) + 1, d, cfg.ffn_ratio)
    else:
        layer = _layer_breakdown([4 * n + 1], 4 * n + 1, d, cfg.ffn_ratio)
    for k, v in layer.items():
        out["sac." + k] = depth * v
    return dict(sorted(out.items()))


def attention_only(cfg: ModelConfig) -> dict[str, int]:
    """The attention-only formulas, without class token, FFN or embedding terms."""
    d, n, m = cfg.embed_dim, cfg.num_low_tokens, cfg.num_targets
    ee = 4 * n * d * d + 2 * n * n * d
    target = 16 * m * d * d + 2 * (4 * m) ** 2 * d
    nontarget = 4 * (n - m) * d * d + 2 * (n - m) ** 2 * d
    return {
        "ee_mhsa": ee,
        "sac_target_mhsa": target,
        "sac_nontarget_mhsa": nontarget,
        "sac_vit_mhsa_total": ee + target + nontarget,
        "vanilla_mhsa_full_res": 4 * (4 * n) * d * d + 2 * (4 * n) ** 2 * d,
    }


@dataclass
class CostReport:
    ee_macs: int
    sac_macs: int
    embed_macs: int
    classifier_macs: int
    fusion_macs: int
    ee_embed_macs: int
    sac_embed_macs: int
    total_per_sample_exit: int
    total_per_sample_full: int
    clustered: bool
    breakdown: dict[str, int] = field(default_factory=dict)
    attention_only: dict[str, int] = field(default_factory=dict)
    analytic_vs_instrumented_delta: int | None = None

    @property
    def ee_total(self) -> int:
        return self.total_per_sample_exit

    @property
    def sac_total(self) -> int:
        return self.total_per_sample_full - self.total_per_sample_exit

    def expected_total(self, exit_fraction: float) -> float:
        """Mean MACs per sample when ``exit_fraction`` of samples stop after the first stage."""
        if not 0.0 <= exit_fraction <= 1.0:
            raise ValueError(f"exit fraction must lie in [0, 1], got {exit_fraction}")
        if exit_fraction == 1.0:
            return float(self.ee_total)
        return self.ee_total + (1.0 - exit_fraction) * self.sac_total

    def exit_fraction_for(self, budget: float) -> float:
        """Exit fraction at which the expected cost equals ``budget``."""
        return 1.0 - (budget - self.ee_total) / self.sac_total

    def to_dict(self, exit_fraction: float | None = None) -> dict:
        d = asdict(self)
        if exit_fraction is not None:
            d["exit_fraction"] = exit_fraction
            d["expected_total"] = self.expected_total(exit_fraction)
        return d

    def to_json(self, exit_fraction: float | None = None) -> str:
        return json.dumps(self.to_dict(exit_fraction), indent=2, sort_keys=True)


def macs_sac_vit(cfg: ModelConfig, clustered: bool = True) -> CostReport:
    b = analytic_breakdown(cfg, clustered)
    ee_layers = sum(v for k, v in b.items() if k.startswith("ee.") and k not in ("ee.embed", "ee.head"))
    sac_layers = sum(v for k, v in b.items() if k.startswith("sac.") and k not in ("sac.embed", "sac.head", "sac.fusion"))
    fusion = b.get("sac.fusion", 0)
    ee_total = b["ee.embed"] + ee_layers + b["ee.head"]
    sac_total = b["sac.embed"] + fusion + sac_layers + b["sac.head"]
    return CostReport(
        ee_macs=ee_layers,
        sac_macs=sac_layers,
        embed_macs=b["ee.embed"] + b["sac.embed"],
        classifier_macs=b["ee.head"] + b["sac.head"],
        fusion_macs=fusion,
        ee_embed_macs=b["ee.embed"],
        sac_embed_macs=b["sac.embed"],
        total_per_sample_exit=ee_total,
        total_per_sample_full=ee_total + sac_total,
        clustered=clustered,
        breakdown=b,
        attention_only=attention_only(cfg),
    )


@dataclass
class CrosscheckResult:
    delta: int
    analytic_total: int
    instrumented_total: int
    mismatches: dict[str, tuple[int, int]]

    @property
    def ok(self) -> bool:
        return self.delta == 0 and not self.mismatches

    def describe(self) -> str:
        if self.ok:
            return f"analytic == instrumented == {self.analytic_total} MACs"
        rows = [f"  {k}: analytic={a} instrumented={i} diff={a - i}" for k, (a, i) in sorted(self.mismatches.items())]
        return f"delta {self.delta} (analytic {self.analytic_total}, instrumented {self.instrumented_total})\n" + "\n".join(rows)


def instrumented_breakdown(cfg: ModelConfig, partition=None, params: ModelParams | None = None,
                           clustered: bool = True, seed: int = 0) -> dict[str, int]:
    """Run both stages on one dummy image and return the counter's per-label MACs."""
    from .clustering import build_partition
    from .early_exit import run_ee_stage
    from .encoder import as_tensors
    from .numerics import MacCounter
    from .sac import run_sac_stage

    params = params if params is not None else init_params(cfg)
    w = as_tensors(params)
    img = np.random.default_rng(seed).standard_normal((1, cfg.in_chans, *cfg.image_hw)).astype(np.float32)
    counter = MacCounter()
    with counter.scope("ee"):
        ee = run_ee_stage(img, w, cfg, eta=1.0, counter=counter)
    parts = None
    if clustered:
        parts = [partition if partition is not None else build_partition(ee.trace.sample(0), cfg)]
    with counter.scope("sac"):
        run_sac_stage(img, w, cfg, ee.sequence, parts, counter)
    return counter.as_dict()


def crosscheck(cfg: ModelConfig, partition=None, *, params: ModelParams | None = None,
               clustered: bool = True, analytic: dict[str, int] | None = None) -> CrosscheckResult:
    """Compare the closed-form breakdown with an instrumented forward; ``delta`` should be 0."""
    analytic = analytic if analytic is not None else analytic_breakdown(cfg, clustered)
    measured = instrumented_breakdown(cfg, partition, params, clustered)
    mismatches = {
        k: (analytic.get(k, 0), measured.get(k, 0))
        for k in analytic.keys() | measured.keys()
        if analytic.get(k, 0) != measured.get(k, 0)
    }
    a_total, m_total = sum(analytic.values()), sum(measured.values())
    return CrosscheckResult(a_total - m_total, a_total, m_total, mismatches)
