import numpy as np
import pytest

from sacvit import DEIT_S, TINY, init_params
from sacvit.autograd import Tensor
from sacvit.encoder import (
    AttentionTrace, TokenSequence, as_tensors, classify, embed_patches, encoder_layer, forward_stack,
)
from sacvit.numerics import MacCounter, ShapeError, precision

import oracles
from trials import block_diagonal_trial


def _seq(x):
    return TokenSequence(Tensor(x), (1, x.shape[1] - 1), "mixed")


def test_token_counts_default_geometry():
    cfg = DEIT_S.replace(embed_dim=12, num_heads=2, depth=0, num_classes=2)
    w = as_tensors(init_params(cfg))
    assert embed_patches(np.zeros((3, 112, 112)), cfg, w, "low").n_tokens == 49
    assert embed_patches(np.zeros((3, 224, 224)), cfg, w, "high").n_tokens == 196
    big = cfg.replace(image_hw=(288, 288))
    assert embed_patches(np.zeros((3, 144, 144)), big, as_tensors(init_params(big)), "low").n_tokens == 81


def test_zero_image_gives_positional_rows(tiny_params, tiny_weights):
    cfg = TINY
    seq = embed_patches(np.zeros((1, 3, 8, 8)), cfg, tiny_weights, "high").tokens.data[0]
    pos, b = tiny_params["pos_embed"], tiny_params["patch_embed.bias"]
    np.testing.assert_allclose(seq[0], tiny_params["cls_token"] + pos[0])
    np.testing.assert_allclose(seq[1:], pos[1:] + b)
    low = embed_patches(np.zeros((1, 3, 4, 4)), cfg, tiny_weights, "low").tokens.data[0]
    grid = pos[1:].reshape(4, 4, -1)
    pooled = np.array([(grid[2 * r, 2 * c] + grid[2 * r, 2 * c + 1] + grid[2 * r + 1, 2 * c] + grid[2 * r + 1, 2 * c + 1]) / 4
                       for r in range(2) for c in range(2)])
    np.testing.assert_allclose(low[1:], pooled + b, rtol=1e-6)


def test_embed_rejects_wrong_shape(tiny_weights):
    with pytest.raises(ShapeError):
        embed_patches(np.zeros((1, 3, 6, 6)), TINY, tiny_weights, "high")


def test_layer_matches_loop_oracle(tiny_params):
    with precision("f64"):
        p = init_params(TINY, dtype=np.float64)
        x = np.random.default_rng(3).standard_normal((1, 5, 8))
        out = encoder_layer(_seq(x), as_tensors(p), 1, TINY).tokens.data[0]
        np.testing.assert_allclose(out, oracles.layer(x[0], p.arrays, 1, 2), atol=1e-12)


def test_single_cluster_is_bit_identical(tiny_weights, rng):
    x = rng.standard_normal((2, 7, 8)).astype(np.float32)
    plain = encoder_layer(_seq(x), tiny_weights, 0, TINY).tokens.data
    masked = encoder_layer(_seq(x), tiny_weights, 0, TINY, mask=np.full(6, 3)).tokens.data
    assert plain.tobytes() == masked.tobytes()


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-5), (np.float64, 1e-10)])
def test_block_diagonal_equivalence(dtype, tol):
    r = np.random.default_rng(7)
    with precision("f64" if dtype == np.float64 else "f32"):
        worst = max(block_diagonal_trial(r, dtype) for _ in range(40))
    assert worst <= tol


def test_permutation_consistency(tiny_weights, rng):
    x = rng.standard_normal((1, 9, 8)).astype(np.float32)
    mask = np.array([0, 1, 0, 1, 1, 0, 2, 2])
    perm = rng.permutation(8)
    out = encoder_layer(_seq(x), tiny_weights, 0, TINY, mask=mask).tokens.data[0]
    xp = np.concatenate([x[:, :1], x[:, 1:][:, perm]], axis=1)
    outp = encoder_layer(_seq(xp), tiny_weights, 0, TINY, mask=mask[perm]).tokens.data[0]
    np.testing.assert_allclose(outp[1:], out[1:][perm], atol=1e-6)
    np.testing.assert_allclose(outp[0], out[0], atol=1e-6)


def test_cluster_isolation(tiny_weights, rng):
    x = rng.standard_normal((1, 7, 8)).astype(np.float32)
    mask = np.array([0, 0, 0, 1, 1, 1])
    base = encoder_layer(_seq(x), tiny_weights, 0, TINY, mask=mask).tokens.data[0]
    y = x.copy()
    y[0, 4:] += 5.0  # perturb cluster 1 only
    out = encoder_layer(_seq(y), tiny_weights, 0, TINY, mask=mask).tokens.data[0]
    np.testing.assert_array_equal(out[1:4], base[1:4])


@pytest.mark.parametrize("n", [5, 17, 50])
def test_layer_mac_count(n):
    cfg = TINY.replace(embed_dim=12, num_heads=3)
    w = as_tensors(init_params(cfg))
    c = MacCounter()
    encoder_layer(_seq(np.zeros((1, n, 12), dtype=np.float32)), w, 0, cfg, counter=c)
    d = 12
    assert c.total_macs == 4 * n * d * d + 2 * n * n * d + 8 * n * d * d


def test_zero_depth_is_identity(rng):
    cfg = TINY.replace(depth=0)
    x = rng.standard_normal((1, 5, 8)).astype(np.float32)
    out, _ = forward_stack(_seq(x), as_tensors(init_params(cfg)), cfg)
    assert out.tokens.data.tobytes() == x.tobytes()


def test_trace_records_one_row_per_layer(tiny_weights, rng):
    x = rng.standard_normal((3, 5, 8)).astype(np.float32)
    trace = AttentionTrace(0.5)
    forward_stack(_seq(x), tiny_weights, TINY, trace=trace)
    assert len(trace) == TINY.depth
    for row in trace.per_layer_cls_rows:
        assert row.shape == (3, 4)
        assert np.all(row >= 0) and np.all(row.sum(axis=1) <= 1 + 1e-6)


def test_trace_with_mask_rejected(tiny_weights):
    with pytest.raises(ValueError):
        encoder_layer(_seq(np.zeros((1, 5, 8), np.float32)), tiny_weights, 0, TINY,
                      mask=np.array([0, 0, 1, 1]), trace=AttentionTrace(0.5))


def test_mask_length_mismatch(tiny_weights):
    with pytest.raises(ShapeError):
        encoder_layer(_seq(np.zeros((1, 5, 8), np.float32)), tiny_weights, 0, TINY, mask=np.array([0, 1]))


def test_classify_shape_and_determinism(tiny_weights, rng):
    x = rng.standard_normal((4, 5, 8)).astype(np.float32)
    a = classify(_seq(x), tiny_weights).data
    assert a.shape == (4, 2)
    assert a.tobytes() == classify(_seq(x), tiny_weights).data.tobytes()
