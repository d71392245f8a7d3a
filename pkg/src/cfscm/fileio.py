"""CFT1 tensor files, PGM images and small CSV/JSON helpers.

CFT1 layout (all little-endian)::

    b"CFT1" | dtype u8 (1 = float64) | rank u8 | 2 zero bytes | rank x u64 dims | payload

The payload is row-major and exactly ``8 * prod(dims)`` bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CFT1"
DTYPE_F64 = 1


class FormatError(ValueError):
    pass


def encode_cft1(array) -> bytes:
    a = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    if a.ndim > 255:
        raise FormatError("rank too large")
    head = MAGIC + struct.pack("<BB2x", DTYPE_F64, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes(order="C")


def decode_cft1(data: bytes) -> np.ndarray:
    if len(data) < 8 or data[:4] != MAGIC:
        raise FormatError("not a CFT1 tensor")
    dtype, rank = struct.unpack_from("<BB", data, 4)
    if dtype != DTYPE_F64:
        raise FormatError(f"unsupported dtype code {dtype}")
    if data[6:8] != b"\x00\x00":
        raise FormatError("reserved bytes must be zero")
    off = 8 + 8 * rank
    if len(data) < off:
        raise FormatError("truncated header")
    dims = struct.unpack_from(f"<{rank}Q", data, 8)
    expected = 8 * int(np.prod(dims, dtype=np.int64))
    if len(data) - off != expected:
        raise FormatError(f"payload is {len(data) - off} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f8", offset=off).reshape(dims).astype(np.float64)


def write_cft1(path, array) -> None:
    Path(path).write_bytes(encode_cft1(array))


def read_cft1(path) -> np.ndarray:
    return decode_cft1(Path(path).read_bytes())


def write_pgm(path, image, lo: float = 0.0, hi: float = 1.0) -> None:
    """Binary P5 greyscale, maxval 255; values mapped linearly from [lo, hi]."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise FormatError("PGM needs a 2-D array")
    scaled = np.clip(np.rint((img - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    h, w = scaled.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + scaled.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError("not a P5 PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise FormatError("only maxval 255 supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def write_difference_pgm(path, delta, scale: float | None = None) -> None:
    """Signed difference image: 0 maps to 128, +/-scale to 255/1."""
    delta = np.asarray(delta, dtype=float)
    if scale is None:
        scale = float(np.max(np.abs(delta))) or 1.0
    write_pgm(path, delta, lo=-scale * 128.0 / 127.0, hi=scale)


def image_grid(images, cols: int, pad: int = 1, fill: float = 0.0) -> np.ndarray:
    images = np.asarray(images, dtype=float)
    n, h, w = images.shape
    rows = -(-n // cols)
    grid = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad), fill)
    for k in range(n):
        r, c = divmod(k, cols)
        grid[pad + r * (h + pad): pad + r * (h + pad) + h, pad + c * (w + pad): pad + c * (w + pad) + w] = images[k]
    return grid


def dump_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def fmt(x: float) -> str:
    """Shortest round-trip float text (stable across runs)."""
    return repr(float(x))
