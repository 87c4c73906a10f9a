"""Bit-exact binary containers for tensors and index maps.

Tensor container ("TNSR"): magic b"TNSR", version u16 (=1), dtype u8
(0 = float32, 1 = float64), rank u8, rank x u32 dims, then the payload as
row-major little-endian scalars.

Index-map container ("IMAP"): magic b"IMAP", version u16 (=1), rank u8,
rank x u32 dims, payload as row-major little-endian u32.

All header integers are little-endian. Writing the same array twice produces
identical bytes; reading back reproduces the array bit-exactly.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataFormatError, ValidationError

TENSOR_MAGIC = b"TNSR"
INDEX_MAGIC = b"IMAP"
FORMAT_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tensor(path: str, array: np.ndarray) -> None:
    """Write a float32/float64 array; other dtypes are rejected."""
    array = np.asarray(array)
    if array.dtype not in _DTYPE_CODES:
        raise ValidationError(f"tensor dtype must be float32/float64, got {array.dtype}")
    code = _DTYPE_CODES[array.dtype]
    header = TENSOR_MAGIC + struct.pack("<HBB", FORMAT_VERSION, code, array.ndim)
    dims = struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array).astype(_CODE_DTYPES[code], copy=False)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(payload.tobytes())


def read_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != TENSOR_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r}, expected {TENSOR_MAGIC!r}")
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated header")
    version, code, rank = struct.unpack("<HBB", raw[4:8])
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    if code not in _CODE_DTYPES:
        raise DataFormatError(f"{path}: unknown dtype code {code}")
    shape, offset = _read_dims(path, raw, rank, 8)
    dtype = _CODE_DTYPES[code]
    return _read_payload(path, raw, offset, shape, dtype)


def write_index_map(path: str, array: np.ndarray) -> None:
    """Write an integer array with values in [0, 2^32) as u32."""
    array = np.asarray(array)
    if not np.issubdtype(array.dtype, np.integer):
        raise ValidationError(f"index map must be integer, got dtype {array.dtype}")
    if array.size and (array.min() < 0 or array.max() > 0xFFFFFFFF):
        raise ValidationError("index map values must fit in u32")
    header = INDEX_MAGIC + struct.pack("<HB", FORMAT_VERSION, array.ndim)
    dims = struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array).astype("<u4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(payload.tobytes())


def read_index_map(path: str) -> np.ndarray:
    """Read an index map back as int64 (so the u32 sentinel stays comparable)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != INDEX_MAGIC:
        raise DataFormatError(f"{path}: bad magic {raw[:4]!r}, expected {INDEX_MAGIC!r}")
    if len(raw) < 7:
        raise DataFormatError(f"{path}: truncated header")
    version, rank = struct.unpack("<HB", raw[4:7])
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    shape, offset = _read_dims(path, raw, rank, 7)
    return _read_payload(path, raw, offset, shape, np.dtype("<u4")).astype(np.int64)


def _read_dims(path: str, raw: bytes, rank: int, offset: int) -> tuple[tuple[int, ...], int]:
    end = offset + 4 * rank
    if len(raw) < end:
        raise DataFormatError(f"{path}: truncated dimension list")
    shape = struct.unpack(f"<{rank}I", raw[offset:end])
    return shape, end


def _read_payload(
    path: str, raw: bytes, offset: int, shape: tuple[int, ...], dtype: np.dtype
) -> np.ndarray:
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    expected = offset + count * dtype.itemsize
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: payload size {len(raw) - offset} bytes does not match "
            f"shape {shape} ({expected - offset} expected)"
        )
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    return data.reshape(shape).copy()
