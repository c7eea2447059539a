"""PSFM binary tensor container.

Layout (little-endian): magic ``PSFM`` (4 bytes), u8 version=1,
u32 grid_h, u32 grid_w, u32 dim, then grid_h*grid_w*dim float32 values
in row-major order. The same container backs feature maps, centroid
blocks, checkpoint blocks, and wire payloads, so every consumer reads
tensors identically.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError

MAGIC = b"PSFM"
VERSION = 1

_HEADER = struct.Struct("<4sBIII")


def to_bytes(arr: np.ndarray) -> bytes:
    """Serialize a (grid_h, grid_w, dim) float array to PSFM bytes."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError(f"expected a 3-d array, got shape {arr.shape}")
    h, w, d = arr.shape
    return _HEADER.pack(MAGIC, VERSION, h, w, d) + arr.tobytes()


def from_bytes(buf: bytes) -> np.ndarray:
    """Parse PSFM bytes back into a (grid_h, grid_w, dim) float32 array."""
    if len(buf) < _HEADER.size:
        raise FormatError("buffer too short for a PSFM header")
    magic, version, h, w, d = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported PSFM version {version}")
    if h <= 0 or w <= 0 or d <= 0:
        raise CorruptionError(f"non-positive dimensions in header: {(h, w, d)}")
    expected = h * w * d * 4
    payload = buf[_HEADER.size:]
    if len(payload) != expected:
        raise CorruptionError(
            f"payload length {len(payload)} does not match header "
            f"{(h, w, d)} (expected {expected} bytes)"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, d)
    return np.ascontiguousarray(data)


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(to_bytes(arr))


def read_tensor(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    return from_bytes(path.read_bytes())


def write_matrix(path: str | Path, arr: np.ndarray) -> None:
    """Store a 2-d (rows, cols) matrix as a (rows, 1, cols) PSFM tensor."""
    arr = np.asarray(arr)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {arr.shape}")
    write_tensor(path, arr[:, None, :])


def read_matrix(path: str | Path) -> np.ndarray:
    arr = read_tensor(path)
    if arr.shape[1] != 1:
        raise CorruptionError(f"expected grid_w=1 for a matrix block, got {arr.shape}")
    return arr[:, 0, :]
