import numpy as np
import pytest

from sacvit import DEIT_S, TINY, init_params
from sacvit.autograd import Tensor
from sacvit.clustering import build_partitions, partition_from_scores
from sacvit.early_exit import run_ee_stage
from sacvit.encoder import as_tensors
from sacvit.numerics import MacCounter, ShapeError
from sacvit.sac import NONTARGET, TARGET, build_mixed_sequence, fuse_features, gather_high_res_targets, run_sac_stage

import oracles
from conftest import random_images

SMALL = DEIT_S.replace(embed_dim=8, num_heads=2, depth=1, num_classes=3)


def _ee_and_parts(cfg, weights, imgs):
    ee = run_ee_stage(imgs, weights, cfg, eta=1.0)
    return ee, build_partitions(ee.trace, cfg)


def test_mixed_sequence_default_geometry():
    w = as_tensors(init_params(SMALL))
    imgs = random_images(SMALL, 1)
    ee, parts = _ee_and_parts(SMALL, w, imgs)
    mixed = build_mixed_sequence(imgs, w, SMALL, ee.sequence, parts)
    assert mixed.num_rows == 122
    assert (mixed.cluster_mask == TARGET).sum() == 96 and (mixed.cluster_mask == NONTARGET).sum() == 25


def test_reused_rows_are_bit_identical(tiny_weights):
    imgs = random_images(TINY, 3)
    ee, parts = _ee_and_parts(TINY, tiny_weights, imgs)
    mixed = build_mixed_sequence(imgs, tiny_weights, TINY, ee.sequence, parts).sequence.tokens.data
    m4 = 4 * TINY.num_targets
    for b, p in enumerate(parts):
        expect = ee.sequence.tokens.data[b, p.nontarget_low + 1]
        assert mixed[b, 1 + m4:].tobytes() == expect.tobytes()


def test_gather_high_res_zero_image():
    p = init_params(SMALL)
    part = partition_from_scores(np.eye(49)[0], SMALL)  # low-res patch 0 ranks first
    rows = gather_high_res_targets(np.zeros((1, 3, 224, 224)), as_tensors(p), SMALL, [part]).data[0]
    expect = p["pos_embed"][[1, 2, 15, 16]] + p["patch_embed.bias"]
    np.testing.assert_allclose(rows[:4], expect)


def test_gather_partition_count_mismatch(tiny_weights):
    part = partition_from_scores(np.arange(4.0), TINY)
    with pytest.raises(ShapeError):
        gather_high_res_targets(random_images(TINY, 2), tiny_weights, TINY, [part])


def test_fusion_matches_loop():
    r = np.random.default_rng(0)
    d, m = 3, 2
    wf, bf = r.standard_normal((d, 4 * d)), r.standard_normal(4 * d)
    ee, high = r.standard_normal((1, m, d)), r.standard_normal((1, 4 * m, d))
    out = fuse_features(Tensor(ee), Tensor(high), {"fusion.weight": Tensor(wf), "fusion.bias": Tensor(bf)}).data[0]
    for t in range(m):
        v = ee[0, t] @ wf + bf
        for q in range(4):  # TL, TR, BL, BR
            np.testing.assert_allclose(out[4 * t + q], high[0, 4 * t + q] + v[q * d:(q + 1) * d])


def test_fusion_shape_mismatch():
    w = {"fusion.weight": Tensor(np.zeros((2, 8))), "fusion.bias": Tensor(np.zeros(8))}
    with pytest.raises(ShapeError):
        fuse_features(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 7, 2))), w)


def test_sac_layer_macs_match_cluster_formula():
    w = as_tensors(init_params(SMALL))
    imgs = random_images(SMALL, 1)
    ee, parts = _ee_and_parts(SMALL, w, imgs)
    c = MacCounter()
    run_sac_stage(imgs, w, SMALL, ee.sequence, parts, c)
    d, m, n = 8, 24, 49
    attn = sum(4 * s * d * d + 2 * s * s * d for s in (4 * m + 1, n - m + 1))
    got = sum(v for k, v in c.as_dict().items() if k.startswith("attn."))
    assert got == attn
    assert c.per_label["ffn"] == 8 * (4 * m + n - m + 1) * d * d
    assert c.per_label["fusion"] == m * d * 4 * d


def test_sac_stage_matches_loop_oracle():
    cfg = TINY.replace(depth=1)
    p = init_params(cfg, dtype=np.float64)
    arrays = {k: (v * 10 if v.ndim == 2 else v) for k, v in p.arrays.items()}
    w = as_tensors(arrays)
    imgs = random_images(cfg, 1).astype(np.float64)
    ee, parts = _ee_and_parts(cfg, w, imgs)
    mixed = build_mixed_sequence(imgs, w, cfg, ee.sequence, parts)
    x = mixed.sequence.tokens.data[0]
    ref = oracles.clustered_layer(x, arrays, 0, cfg.num_heads, mixed.cluster_mask)
    _, logits = run_sac_stage(imgs, w, cfg, ee.sequence, parts)
    cls = oracles.ln(ref[:1], arrays["norm.gain"], arrays["norm.bias"])
    np.testing.assert_allclose(logits.data, cls @ arrays["head.weight"] + arrays["head.bias"], atol=1e-10)


def test_size_weighted_merge_differs():
    imgs = random_images(TINY, 1)
    outs = []
    for merge in ("mean", "size"):
        cfg = TINY.replace(class_token_merge=merge, alpha=0.25)
        w = as_tensors(init_params(cfg))
        ee, parts = _ee_and_parts(cfg, w, imgs)
        outs.append(run_sac_stage(imgs, w, cfg, ee.sequence, parts)[1].data)
    assert not np.allclose(outs[0], outs[1])


def test_unclustered_phase_uses_all_high_res_tokens(tiny_weights):
    c = MacCounter()
    outs, logits = run_sac_stage(random_images(TINY, 2), tiny_weights, TINY, None, None, c)
    n = 4 * TINY.num_low_tokens + 1
    assert c.per_label["attn.scores"] == 2 * TINY.depth * n * n * TINY.embed_dim  # batch of 2
    assert logits.shape == (2, 2) and all(o.exited for o in outs)
    assert "fusion" not in c.per_label


def test_sac_deterministic(tiny_weights):
    imgs = random_images(TINY, 2)
    ee, parts = _ee_and_parts(TINY, tiny_weights, imgs)
    a = run_sac_stage(imgs, tiny_weights, TINY, ee.sequence, parts)[1].data
    b = run_sac_stage(imgs, tiny_weights, TINY, ee.sequence, parts)[1].data
    assert a.tobytes() == b.tobytes()
