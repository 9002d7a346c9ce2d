"""Shape-tagged binary dumps for predictions: float64 blobs for logits and
depth maps, u8 grids for label maps."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

_MAGIC = b"BLB1"
_KIND_F64 = 0
_KIND_U8 = 1


def _write(path: str | Path, arr: np.ndarray, kind: int, dtype: str) -> None:
    arr = np.ascontiguousarray(arr)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BB", kind, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(dtype).tobytes())


def write_f64_blob(path: str | Path, arr: np.ndarray) -> None:
    _write(path, arr, _KIND_F64, "<f8")


def write_u8_blob(path: str | Path, arr: np.ndarray) -> None:
    a = np.asarray(arr)
    if a.min(initial=0) < 0 or a.max(initial=0) > 255:
        raise ValidationError("u8 blob values must lie in [0, 255]")
    _write(path, a, _KIND_U8, "u1")


def read_blob(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValidationError(f"{path}: not a blob file")
    kind, ndim = struct.unpack_from("<BB", raw, 4)
    shape = struct.unpack_from(f"<{ndim}I", raw, 6)
    off = 6 + 4 * ndim
    if kind == _KIND_F64:
        dtype, itemsize = "<f8", 8
    elif kind == _KIND_U8:
        dtype, itemsize = "u1", 1
    else:
        raise ValidationError(f"{path}: unknown blob kind {kind}")
    n = int(np.prod(shape)) if ndim else 1
    if len(raw) != off + n * itemsize:
        raise ValidationError(f"{path}: blob payload size mismatch")
    return np.frombuffer(raw, dtype=dtype, count=n, offset=off).reshape(shape).copy()
