"""Little-endian binary containers for dense tensors (``KSIT``) and CSR graphs (``KSIG``).

Dense layout::

    b"KSIT" | version u32 | dtype u32 (0=f32, 1=f64) | rows u64 | cols u64 | payload

Graph layout::

    b"KSIG" | version u32 | n u64 | nnz u64 | row_offsets u64[n+1] | col_indices u64[nnz] | weights f64[nnz]
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"KSIT"
GRAPH_MAGIC = b"KSIG"
FORMAT_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}

_TENSOR_HEADER = struct.Struct("<4sIIQQ")
_GRAPH_HEADER = struct.Struct("<4sIQQ")


class FormatError(ValueError):
    """Raised when a binary file does not match the expected layout."""


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.ndim == 1:
        array = array.reshape(1, -1)
    if array.ndim != 2:
        raise ValueError(f"expected a 1-D or 2-D array, got shape {array.shape}")
    code = _CODES.get(array.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {array.dtype}; use float32 or float64")
    rows, cols = array.shape
    header = _TENSOR_HEADER.pack(TENSOR_MAGIC, FORMAT_VERSION, code, rows, cols)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes(order="C")
    return header + payload


def decode_tensor(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < _TENSOR_HEADER.size:
        raise FormatError(f"{source}: truncated header ({len(data)} bytes)")
    magic, version, code, rows, cols = _TENSOR_HEADER.unpack_from(data)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported format version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    dtype = _DTYPES[code]
    expected = rows * cols * dtype.itemsize
    payload = data[_TENSOR_HEADER.size :]
    if len(payload) != expected:
        raise FormatError(
            f"{source}: truncated payload, expected {expected} bytes for {rows}x{cols}, got {len(payload)}"
        )
    out = np.frombuffer(payload, dtype=dtype).reshape(rows, cols)
    return out.astype(dtype.newbyteorder("="), copy=True)


def save_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    atomic_write_bytes(path, encode_tensor(array))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    return decode_tensor(path.read_bytes(), source=str(path))


def encode_graph(n: int, row_offsets: np.ndarray, col_indices: np.ndarray, weights: np.ndarray) -> bytes:
    nnz = int(len(col_indices))
    if len(row_offsets) != n + 1 or len(weights) != nnz:
        raise ValueError("inconsistent CSR arrays")
    parts = [
        _GRAPH_HEADER.pack(GRAPH_MAGIC, FORMAT_VERSION, n, nnz),
        np.ascontiguousarray(row_offsets, dtype="<u8").tobytes(),
        np.ascontiguousarray(col_indices, dtype="<u8").tobytes(),
        np.ascontiguousarray(weights, dtype="<f8").tobytes(),
    ]
    return b"".join(parts)


def decode_graph(data: bytes, source: str = "<bytes>") -> tuple[int, np.ndarray, np.ndarray, np.ndarray]:
    if len(data) < _GRAPH_HEADER.size:
        raise FormatError(f"{source}: truncated header")
    magic, version, n, nnz = _GRAPH_HEADER.unpack_from(data)
    if magic != GRAPH_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {GRAPH_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported format version {version}")
    expected = 8 * (n + 1) + 8 * nnz + 8 * nnz
    body = data[_GRAPH_HEADER.size :]
    if len(body) != expected:
        raise FormatError(f"{source}: truncated payload, expected {expected} bytes, got {len(body)}")
    off = 0
    row_offsets = np.frombuffer(body, dtype="<u8", count=n + 1, offset=off).astype(np.int64)
    off += 8 * (n + 1)
    col_indices = np.frombuffer(body, dtype="<u8", count=nnz, offset=off).astype(np.int64)
    off += 8 * nnz
    weights = np.frombuffer(body, dtype="<f8", count=nnz, offset=off).astype(np.float64)
    return int(n), row_offsets, col_indices, weights
