"""Binary file formats, all little-endian and row-major.

``CY2T``  tensor:  u32 rank, u32 dims[rank], f64 payload
``CY2M``  matrix:  u32 N, f32 payload (N x N)
``CY2S``  signals: u32 T, N, C, u64 start_timestamp, u32 interval_seconds, f32 payload
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

TENSOR_MAGIC = b"CY2T"
MATRIX_MAGIC = b"CY2M"
SIGNAL_MAGIC = b"CY2S"


def _read_magic(buf: bytes, magic: bytes, path) -> None:
    if buf[:4] != magic:
        raise ParseError(f"{path}: bad magic {buf[:4]!r}, expected {magic!r}")


def write_tensor(path, array) -> None:
    arr = np.ascontiguousarray(array, dtype="<f8")
    header = TENSOR_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    _read_magic(buf, TENSOR_MAGIC, path)
    try:
        (rank,) = struct.unpack_from("<I", buf, 4)
        dims = struct.unpack_from(f"<{rank}I", buf, 8)
    except struct.error:
        raise ParseError(f"{path}: truncated header") from None
    offset = 8 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(buf) - offset != 8 * count:
        raise ParseError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(buf, dtype="<f8", offset=offset).reshape(dims).astype(np.float64)


def write_matrix(path, matrix) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"matrix must be square, got {m.shape}")
    Path(path).write_bytes(MATRIX_MAGIC + struct.pack("<I", m.shape[0]) + m.tobytes())


def read_matrix(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    _read_magic(buf, MATRIX_MAGIC, path)
    (n,) = struct.unpack_from("<I", buf, 4)
    if len(buf) - 8 != 4 * n * n:
        raise ParseError(f"{path}: payload size does not match N={n}")
    return np.frombuffer(buf, dtype="<f4", offset=8).reshape(n, n).astype(np.float64)


_SIGNAL_HEADER = struct.Struct("<4sIIIQI")


def write_signal_array(path, data, start_timestamp: int, interval_seconds: int) -> None:
    arr = np.ascontiguousarray(data, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError(f"signal payload must be T x N x C, got {arr.shape}")
    header = _SIGNAL_HEADER.pack(SIGNAL_MAGIC, *arr.shape, int(start_timestamp), int(interval_seconds))
    Path(path).write_bytes(header + arr.tobytes())


def read_signal_array(path) -> tuple[np.ndarray, int, int]:
    buf = Path(path).read_bytes()
    if len(buf) < _SIGNAL_HEADER.size:
        raise ParseError(f"{path}: truncated header")
    magic, t, n, c, start, interval = _SIGNAL_HEADER.unpack_from(buf)
    _read_magic(magic, SIGNAL_MAGIC, path)
    if len(buf) - _SIGNAL_HEADER.size != 4 * t * n * c:
        raise ParseError(f"{path}: payload size does not match {t}x{n}x{c}")
    data = np.frombuffer(buf, dtype="<f4", offset=_SIGNAL_HEADER.size).reshape(t, n, c)
    return data.astype(np.float64), start, interval
