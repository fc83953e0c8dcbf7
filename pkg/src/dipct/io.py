"""Image/sinogram file formats.

Binary arrays are little-endian float32 preceded by a 16-byte header:
8-byte magic, uint32 width (columns), uint32 height (rows).
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

MAGIC = b"DIPCTF32"
_HEADER = np.dtype([("magic", "S8"), ("width", "<u4"), ("height", "<u4")])


class FormatError(ValueError):
    pass


def to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("refusing to serialize non-finite values")
    header = np.array([(MAGIC, arr.shape[1], arr.shape[0])], dtype=_HEADER)
    return header.tobytes() + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.itemsize:
        raise FormatError("file too short for header")
    header = np.frombuffer(buf[: _HEADER.itemsize], dtype=_HEADER)[0]
    if header["magic"] != MAGIC:
        raise FormatError(f"bad magic {header['magic']!r}")
    width, height = int(header["width"]), int(header["height"])
    data = np.frombuffer(buf[_HEADER.itemsize :], dtype="<f4")
    if data.size != width * height:
        raise FormatError(f"payload has {data.size} values, header says {width}x{height}")
    return data.reshape(height, width).astype(np.float64)


def save_array(path, arr: np.ndarray) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(arr))
    return path


def load_array(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())


def _to_uint8(arr: np.ndarray, vmin: float | None, vmax: float | None) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    lo = arr.min() if vmin is None else vmin
    hi = arr.max() if vmax is None else vmax
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    return np.clip(np.round((arr - lo) * scale), 0, 255).astype(np.uint8)


def save_pgm(path, arr: np.ndarray, vmin: float | None = None, vmax: float | None = None) -> Path:
    """Binary (P5) 8-bit PGM, linearly scaled to [vmin, vmax] (data range by default)."""
    path = Path(path)
    img = _to_uint8(arr, vmin, vmax)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    path.write_bytes(header + img.tobytes())
    return path


def save_png(path, arr: np.ndarray, vmin: float | None = None, vmax: float | None = None) -> Path:
    path = Path(path)
    PILImage.fromarray(_to_uint8(arr, vmin, vmax), mode="L").save(path)
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
