import json

import numpy as np
import pytest

from sacvit.model import (
    DEIT_S, TINY, CheckpointFormatError, CheckpointShapeError, CheckpointTruncatedError, ConfigError,
    ModelConfig, init_params, load_checkpoint, param_shapes, save_checkpoint, target_count,
)
from sacvit.numerics import ShapeError

from oracles import deit_param_count


def test_defaults_match_deit_small():
    assert (DEIT_S.embed_dim, DEIT_S.depth, DEIT_S.num_heads, DEIT_S.patch_size) == (384, 12, 6, 16)
    assert DEIT_S.image_hw == (224, 224) and DEIT_S.num_classes == 1000
    assert (DEIT_S.alpha, DEIT_S.beta, DEIT_S.eta) == (0.5, 0.99, 0.45)
    assert DEIT_S.head_dim == 64
    assert DEIT_S.low_grid == (7, 7) and DEIT_S.high_grid == (14, 14)
    assert DEIT_S.num_low_tokens == 49 and DEIT_S.num_targets == 24


@pytest.mark.parametrize("changes", [
    {"embed_dim": 10, "num_heads": 4},
    {"image_hw": (200, 224)},
    {"alpha": 0.0},
    {"alpha": 1.0},
    {"beta": 1.0},
    {"eta": 1.5},
    {"class_token_merge": "max"},
])
def test_invalid_configs_rejected(changes):
    with pytest.raises(ConfigError):
        DEIT_S.replace(**changes)


def test_config_dict_roundtrip_and_unknown_key():
    assert ModelConfig.from_dict(TINY.to_dict()) == TINY
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**TINY.to_dict(), "bogus": 1})


@pytest.mark.parametrize("alpha,n,m", [(0.5, 49, 24), (0.3, 10, 3), (0.1, 4, 1), (0.9, 4, 3), (0.99, 10, 9)])
def test_target_count(alpha, n, m):
    assert target_count(alpha, n) == m


def test_init_deterministic_and_seeded():
    a, b = init_params(TINY), init_params(TINY)
    assert a.checksum() == b.checksum()
    assert init_params(TINY.replace(seed=1)).checksum() != a.checksum()


def test_init_layout(tiny_params):
    tiny_params.audit()
    assert np.all(tiny_params["blocks.0.ln1.gain"] == 1)
    assert np.all(tiny_params["blocks.0.attn.bq"] == 0)
    w = tiny_params["blocks.0.ffn.w1"]
    assert np.max(np.abs(w)) <= 0.04 + 1e-7


def test_deit_parameter_count():
    shapes = param_shapes(DEIT_S)
    count = sum(int(np.prod(s)) for s in shapes.values())
    oracle = deit_param_count(384, 12, 16, 3, 4 * 49 + 1, 1000)
    assert count == oracle
    # the backbone alone (no fusion map) is DeiT-S sized
    backbone = count - (384 * 4 * 384 + 4 * 384)
    assert abs(backbone - 22e6) / 22e6 < 0.10


def test_audit_catches_wrong_shape(tiny_params):
    tiny_params.arrays["head.bias"] = np.zeros(3, dtype=np.float32)
    with pytest.raises(ShapeError):
        tiny_params.audit()


def test_checkpoint_roundtrip_bit_exact(tmp_path, tiny_params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_params, TINY, path)
    loaded, cfg = load_checkpoint(path)
    assert cfg == TINY
    for name in tiny_params:
        assert loaded[name].tobytes() == tiny_params[name].tobytes()
    save_checkpoint(loaded, cfg, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_truncated(tmp_path, tiny_params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_params, TINY, path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path, tiny_params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_params, TINY, path)
    path.write_bytes(b"XXXXXXXX" + path.read_bytes()[8:])
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch(tmp_path, tiny_params):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_params, TINY, path)
    raw = path.read_bytes()
    sep = raw.find(b"\n\0", 8)
    header = json.loads(raw[8:sep])
    for t in header["tensors"]:
        if t["name"] == "head.bias":
            t["shape"] = [1, 2]
    path.write_bytes(raw[:8] + json.dumps(header, sort_keys=True).encode() + raw[sep:])
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(path)
