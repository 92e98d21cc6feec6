"""Model configuration, parameter storage and the checkpoint format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from . import numerics


class ConfigError(ValueError):
    pass


def target_count(alpha: float, n: int) -> int:
    """floor(alpha * n) clamped to [1, n - 1] so both clusters are non-empty."""
    # the epsilon keeps decimal ratios such as 0.3 * 10 from flooring to 2
    return min(max(math.floor(alpha * n + 1e-9), 1), n - 1)


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 384
    depth: int = 12
    num_heads: int = 6
    patch_size: int = 16
    image_hw: tuple[int, int] = (224, 224)
    num_classes: int = 1000
    alpha: float = 0.5
    beta: float = 0.99
    eta: float = 0.45
    ffn_ratio: int = 4
    seed: int = 0
    in_chans: int = 3
    # how the per-cluster copies of the class token are merged: "mean" or "size"
    class_token_merge: str = "mean"

    def __post_init__(self) -> None:
        object.__setattr__(self, "image_hw", tuple(int(v) for v in self.image_hw))
        self.validate()

    def validate(self) -> None:
        d, h, p = self.embed_dim, self.num_heads, self.patch_size
        if min(d, h, p, self.num_classes, self.ffn_ratio, self.in_chans) <= 0 or self.depth < 0:
            raise ConfigError("dimensions must be positive (depth may be 0)")
        if d % h:
            raise ConfigError(f"embed_dim {d} is not divisible by num_heads {h}")
        H, W = self.image_hw
        if H % (2 * p) or W % (2 * p):
            raise ConfigError(f"image {H}x{W} must be divisible by 2*patch_size = {2 * p}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError(f"beta must lie in [0, 1), got {self.beta}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")
        if self.class_token_merge not in ("mean", "size"):
            raise ConfigError(f"class_token_merge must be 'mean' or 'size', got {self.class_token_merge!r}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def low_grid(self) -> tuple[int, int]:
        H, W = self.image_hw
        return H // (2 * self.patch_size), W // (2 * self.patch_size)

    @property
    def high_grid(self) -> tuple[int, int]:
        gh, gw = self.low_grid
        return 2 * gh, 2 * gw

    @property
    def num_low_tokens(self) -> int:
        return math.prod(self.low_grid)

    @property
    def num_targets(self) -> int:
        return target_count(self.alpha, self.num_low_tokens)

    @property
    def patch_dim(self) -> int:
        return self.in_chans * self.patch_size**2

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["image_hw"] = list(self.image_hw)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


DEIT_S = ModelConfig()
TINY = ModelConfig(embed_dim=8, depth=2, num_heads=2, patch_size=2, image_hw=(8, 8), num_classes=2, seed=0)
TOY = ModelConfig(embed_dim=16, depth=2, num_heads=2, patch_size=2, image_hw=(16, 16), num_classes=2, seed=0)
PRESETS = {"deit-s": DEIT_S, "tiny": TINY, "toy": TOY}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter, in canonical (serialization) order."""
    d, c = cfg.embed_dim, cfg.num_classes
    hidden = cfg.ffn_ratio * d
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (cfg.patch_dim, d),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (4 * cfg.num_low_tokens + 1, d),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "attn.wq": (d, d), p + "attn.bq": (d,),
            p + "attn.wk": (d, d), p + "attn.bk": (d,),
            p + "attn.wv": (d, d), p + "attn.bv": (d,),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
            p + "ffn.w1": (d, hidden), p + "ffn.b1": (hidden,),
            p + "ffn.w2": (hidden, d), p + "ffn.b2": (d,),
        })
    shapes.update({
        "norm.gain": (d,), "norm.bias": (d,),
        "head.weight": (d, c), "head.bias": (c,),
        "fusion.weight": (d, 4 * d), "fusion.bias": (4 * d,),
    })
    return shapes


@dataclass
class ModelParams(Mapping[str, np.ndarray]):
    """Named parameter arrays for one model; both stages read the same set."""

    cfg: ModelConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    @property
    def num_parameters(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def audit(self) -> None:
        """Raise :class:`numerics.ShapeError` unless every array matches the config."""
        expected = param_shapes(self.cfg)
        missing = expected.keys() - self.arrays.keys()
        extra = self.arrays.keys() - expected.keys()
        if missing or extra:
            raise numerics.ShapeError(f"parameter names differ: missing={sorted(missing)} extra={sorted(extra)}")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise numerics.ShapeError(f"{name}: expected shape {shape}, got {self.arrays[name].shape}")

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in param_shapes(self.cfg):
            a = self.arrays[name]
            h.update(name.encode())
            h.update(str(a.shape).encode())
            h.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
        return h.hexdigest()


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    # resample anything beyond two standard deviations
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(cfg: ModelConfig, dtype=None) -> ModelParams:
    cfg.validate()
    dtype = dtype or numerics.get_dtype()
    rng = np.random.default_rng(cfg.seed)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            a = np.ones(shape)
        elif leaf.startswith("b") or name == "cls_token":
            a = np.zeros(shape)
        else:
            a = _trunc_normal(rng, shape, 0.02)
        arrays[name] = a.astype(dtype)
    return ModelParams(cfg, arrays)


# --- checkpoint I/O -------------------------------------------------------

MAGIC = b"SACVIT01"
SEPARATOR = b"\n\0"


class CheckpointError(Exception):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic string, unsupported version, or unparseable header."""


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def save_checkpoint(params: ModelParams, cfg: ModelConfig, path: str | Path) -> None:
    params.audit()
    tensors, blobs, offset = [], [], 0
    for name, shape in param_shapes(cfg).items():
        raw = np.ascontiguousarray(params[name], dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"format": MAGIC.decode(), "config": cfg.to_dict(), "tensors": tensors, "blob_bytes": offset}
    payload = MAGIC + json.dumps(header, sort_keys=True).encode("utf-8") + SEPARATOR + b"".join(blobs)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, ModelConfig]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointFormatError(f"{path}: not a checkpoint (expected magic {MAGIC.decode()})")
    sep = raw.find(SEPARATOR, len(MAGIC))
    if sep < 0:
        raise CheckpointTruncatedError(f"{path}: header separator missing")
    try:
        header = json.loads(raw[len(MAGIC):sep].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: bad header: {exc}") from None
    if header.get("format") != MAGIC.decode():
        raise CheckpointFormatError(f"{path}: unsupported format version {header.get('format')!r}")
    try:
        cfg = ModelConfig.from_dict(header["config"])
    except (ConfigError, TypeError, KeyError) as exc:
        raise CheckpointFormatError(f"{path}: bad config in header: {exc}") from None
    blob = raw[sep + len(SEPARATOR):]
    if len(blob) < header["blob_bytes"]:
        raise CheckpointTruncatedError(f"{path}: blob has {len(blob)} bytes, header promises {header['blob_bytes']}")
    if len(blob) > header["blob_bytes"]:
        raise CheckpointFormatError(f"{path}: {len(blob) - header['blob_bytes']} trailing bytes after blob")
    expected = param_shapes(cfg)
    arrays = {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if expected.get(name) != shape:
            raise CheckpointShapeError(f"{path}: tensor {name} has shape {shape}, config implies {expected.get(name)}")
        if entry["nbytes"] != 4 * math.prod(shape):
            raise CheckpointShapeError(f"{path}: tensor {name} byte size does not match its shape")
        end = entry["offset"] + entry["nbytes"]
        if end > len(blob):
            raise CheckpointTruncatedError(f"{path}: tensor {name} runs past the end of the blob")
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=math.prod(shape), offset=entry["offset"]).reshape(shape).astype(np.float32)
    params = ModelParams(cfg, arrays)
    try:
        params.audit()
    except numerics.ShapeError as exc:
        raise CheckpointShapeError(f"{path}: {exc}") from None
    return params, cfg
