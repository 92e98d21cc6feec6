"""Raw tensor files, labelled dataset directories and synthetic data."""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"SACT0001"
DTYPE_F32 = b"f32\0"
LABEL_FILE = "labels.tsv"


class DataFormatError(Exception):
    pass


def write_raw_tensor(path: str | Path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3:
        raise DataFormatError(f"raw tensors are (C, H, W); got shape {img.shape}")
    header = TENSOR_MAGIC + DTYPE_F32 + struct.pack("<3I", *img.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(img, dtype="<f4").tobytes())


def read_raw_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 24:
        raise DataFormatError(f"{path}: too short for a raw tensor header")
    if raw[:8] != TENSOR_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:8]!r}")
    if raw[8:12] != DTYPE_F32:
        raise DataFormatError(f"{path}: unsupported dtype tag {raw[8:12]!r}")
    shape = struct.unpack("<3I", raw[12:24])
    payload = raw[24:]
    if len(payload) != 4 * math.prod(shape):
        raise DataFormatError(f"{path}: payload has {len(payload)} bytes, shape {shape} needs {4 * math.prod(shape)}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


@dataclass
class Dataset:
    images: np.ndarray  # (n, C, H, W) float32
    labels: np.ndarray  # (n,) int64
    paths: list[str] | None = None

    def __len__(self) -> int:
        return len(self.labels)


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    index = directory / LABEL_FILE
    if not index.is_file():
        raise DataFormatError(f"{directory}: missing {LABEL_FILE}")
    paths, labels, images = [], [], []
    for lineno, line in enumerate(index.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataFormatError(f"{index}:{lineno}: expected 'path<TAB>label'")
        try:
            label = int(parts[1])
        except ValueError:
            raise DataFormatError(f"{index}:{lineno}: label {parts[1]!r} is not an integer") from None
        paths.append(parts[0])
        labels.append(label)
        images.append(read_raw_tensor(directory / parts[0]))
    if not images:
        raise DataFormatError(f"{index}: no samples")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataFormatError(f"{directory}: images have differing shapes {sorted(shapes)}")
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64), paths)


def save_dataset(ds: Dataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, y) in enumerate(zip(ds.images, ds.labels)):
        name = f"{i:05d}.sact"
        write_raw_tensor(directory / name, img)
        lines.append(f"{name}\t{int(y)}")
    tmp = directory / (LABEL_FILE + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, directory / LABEL_FILE)


def synth_blobs(n: int, image_hw: tuple[int, int] = (16, 16), num_classes: int = 2,
                channels: int = 3, seed: int = 0, noise: float = 0.1) -> Dataset:
    """Gaussian blobs whose centre and colour depend on the class.

    Pixels are standardised to zero mean and unit variance over the set.
    """
    rng = np.random.default_rng(seed)
    H, W = image_hw
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    angles = 2 * np.pi * np.arange(num_classes) / num_classes + np.pi / 4
    centres = np.stack([H / 2 + 0.28 * H * np.sin(angles), W / 2 + 0.28 * W * np.cos(angles)], axis=1)
    colours = np.full((num_classes, channels), 0.2)
    colours[np.arange(num_classes), np.arange(num_classes) % channels] = 1.0
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = np.empty((n, channels, H, W), dtype=np.float64)
    sigma = 0.12 * min(H, W)
    for i, y in enumerate(labels):
        cy, cx = centres[y] + rng.normal(0, 0.04 * min(H, W), size=2)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        images[i] = colours[y][:, None, None] * blob + rng.normal(0, noise, size=(channels, H, W))
    images = (images - images.mean()) / images.std()
    return Dataset(images.astype(np.float32), labels.astype(np.int64))
