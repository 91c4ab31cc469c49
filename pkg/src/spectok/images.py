"""Raw image tensors: a 16-byte header of four little-endian u32 (rank=3, C, H, W)
followed by C*H*W little-endian float64 values in row-major order."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

HEADER = struct.Struct("<4I")
SUFFIX = ".f64"


def write_raw_image(path, image: np.ndarray) -> None:
    img = np.ascontiguousarray(image, dtype="<f8")
    if img.ndim != 3:
        raise ValueError(f"expected a C x H x W array, got shape {img.shape}")
    Path(path).write_bytes(HEADER.pack(3, *img.shape) + img.tobytes())


def read_raw_image(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < HEADER.size:
        raise ValueError(f"{path}: shorter than the header")
    rank, c, h, w = HEADER.unpack_from(buf)
    if rank != 3 or min(c, h, w) < 1:
        raise ValueError(f"{path}: bad header (rank={rank}, shape={c}x{h}x{w})")
    n = c * h * w
    if len(buf) != HEADER.size + 8 * n:
        raise ValueError(f"{path}: payload is {len(buf) - HEADER.size} bytes, expected {8 * n}")
    return np.frombuffer(buf, dtype="<f8", offset=HEADER.size).reshape(c, h, w).astype(np.float64)
