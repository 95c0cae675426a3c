"""Binary on-disk formats for embedding tables and model checkpoints.

Both formats are little-endian, fixed-layout, and carry explicit counts so
truncated or inconsistent files fail loudly instead of yielding partial data.
Round-trips are bit-exact, which the determinism contracts rely on.
"""

from __future__ import annotations

import json
import struct

import numpy as np

TABLE_MAGIC = b"CRTB"
CKPT_MAGIC = b"CRCK"
FORMAT_VERSION = 1

_DTYPE_CODES = {0: np.float32, 1: np.float64, 2: np.int64}
_DTYPE_BY_NAME = {np.dtype(v).name: k for k, v in _DTYPE_CODES.items()}


class StorageError(ValueError):
    """Corrupt, truncated, or inconsistent binary file."""


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise StorageError(f"truncated file: expected {n} bytes, got {len(buf)}")
    return buf


def write_table(path, stage_code: int, ids: np.ndarray, matrix: np.ndarray) -> None:
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    matrix = np.ascontiguousarray(matrix, dtype=np.float32)
    count, dim = matrix.shape
    if ids.shape != (count,):
        raise StorageError(f"id count {ids.shape} does not match matrix rows {count}")
    with open(path, "wb") as fh:
        fh.write(TABLE_MAGIC)
        fh.write(struct.pack("<IBII", FORMAT_VERSION, stage_code, dim, count))
        fh.write(ids.tobytes())
        fh.write(matrix.tobytes())


def read_table(path) -> tuple[int, np.ndarray, np.ndarray]:
    """Returns (stage_code, ids, matrix); raises StorageError on any mismatch."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != TABLE_MAGIC:
            raise StorageError(f"bad magic {magic!r}, not an embedding table file")
        version, stage_code, dim, count = struct.unpack("<IBII", _read_exact(fh, 13))
        if version != FORMAT_VERSION:
            raise StorageError(f"unsupported table format version {version}")
        ids = np.frombuffer(_read_exact(fh, 8 * count), dtype="<i8").copy()
        body = _read_exact(fh, 4 * count * dim)
        trailing = fh.read(1)
        if trailing:
            raise StorageError("trailing bytes after table body")
    matrix = np.frombuffer(body, dtype="<f4").reshape(count, dim).copy()
    return stage_code, ids, matrix


def write_tensors(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Checkpoint writer: magic, json metadata, then named tensors sorted by name."""
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            if arr.dtype.name not in _DTYPE_BY_NAME:
                raise StorageError(f"unsupported dtype {arr.dtype} for tensor {name}")
            nm = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nm)))
            fh.write(nm)
            fh.write(struct.pack("<BB", _DTYPE_BY_NAME[arr.dtype.name], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != CKPT_MAGIC:
            raise StorageError(f"bad magic {magic!r}, not a checkpoint file")
        version, meta_len = struct.unpack("<II", _read_exact(fh, 8))
        if version != FORMAT_VERSION:
            raise StorageError(f"unsupported checkpoint format version {version}")
        meta = json.loads(_read_exact(fh, meta_len).decode("utf-8"))
        (num_tensors,) = struct.unpack("<I", _read_exact(fh, 4))
        tensors = {}
        for _ in range(num_tensors):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            code, ndim = struct.unpack("<BB", _read_exact(fh, 2))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            dtype = np.dtype(_DTYPE_CODES[code]).newbyteorder("<")
            size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            tensors[name] = np.frombuffer(_read_exact(fh, size), dtype=dtype).reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise StorageError("trailing bytes after checkpoint body")
    return meta, tensors
