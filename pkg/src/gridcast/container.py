"""GCT1 tensor container: a minimal little-endian binary format for named
dense arrays.

Layout::

    magic   4 bytes  b"GCT1"
    count   u32      number of entries
    entry   repeated
        name_len u16
        name     UTF-8 bytes
        dtype    u8    0=uint8, 1=float32, 2=float64
        ndim     u8
        dims     u32 * ndim
        payload  raw row-major scalars

The same container carries traffic movies, static road maps, model
checkpoints and prediction files. Round trips are bit-exact, including
dtype and shape. Writes go through a temp file and an atomic rename so a
crashed writer never leaves a half-written file under the final name.
"""

from __future__ import annotations

import os
import struct
import tempfile
from collections.abc import Mapping
from pathlib import Path

import numpy as np

MAGIC = b"GCT1"

_DTYPE_CODES: dict[int, np.dtype] = {
    0: np.dtype("<u1"),
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
}
_CODE_FOR_KIND = {np.dtype("u1"): 0, np.dtype("f4"): 1, np.dtype("f8"): 2}


class ContainerError(Exception):
    """Base class for GCT1 read/write failures."""


class BadMagicError(ContainerError):
    """File does not start with the GCT1 magic."""


class TruncatedFileError(ContainerError):
    """File ends before a declared header field or payload."""


class UnknownDtypeError(ContainerError):
    """Entry declares a dtype code this format does not define."""


def write_tensor_file(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write a name->array mapping to ``path`` atomically.

    Names must be unique and non-empty; arrays must be uint8, float32 or
    float64. Entry order follows the mapping's iteration order.
    """
    path = Path(path)
    names = list(tensors.keys())
    if len(set(names)) != len(names):
        raise ValueError("duplicate tensor names in container write")
    blobs = []
    for name, arr in tensors.items():
        if not name:
            raise ValueError("empty tensor name in container write")
        arr = np.asarray(arr, order="C")  # keeps 0-d rank, unlike ascontiguousarray
        dtype = arr.dtype.newbyteorder("=")
        if dtype not in _CODE_FOR_KIND:
            raise ValueError(
                f"tensor {name!r} has dtype {arr.dtype}, expected uint8/float32/float64"
            )
        blobs.append((name.encode("utf-8"), _CODE_FOR_KIND[dtype], arr))

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(blobs)))
            for name_bytes, code, arr in blobs:
                f.write(struct.pack("<H", len(name_bytes)))
                f.write(name_bytes)
                f.write(struct.pack("<BB", code, arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_tensor_file(path: str | Path) -> dict[str, np.ndarray]:
    """Read a GCT1 file back into a name->array dict (entry order preserved)."""
    path = Path(path)
    with open(path, "rb") as f:
        data = f.read()

    def take(offset: int, n: int, what: str) -> tuple[bytes, int]:
        if offset + n > len(data):
            raise TruncatedFileError(f"{path}: truncated while reading {what}")
        return data[offset : offset + n], offset + n

    raw, pos = take(0, 4, "magic")
    if raw != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw!r}, expected {MAGIC!r}")
    raw, pos = take(pos, 4, "entry count")
    (count,) = struct.unpack("<I", raw)

    out: dict[str, np.ndarray] = {}
    for i in range(count):
        raw, pos = take(pos, 2, f"entry {i} name length")
        (name_len,) = struct.unpack("<H", raw)
        raw, pos = take(pos, name_len, f"entry {i} name")
        name = raw.decode("utf-8")
        raw, pos = take(pos, 2, f"entry {name!r} dtype/ndim")
        code, ndim = struct.unpack("<BB", raw)
        if code not in _DTYPE_CODES:
            raise UnknownDtypeError(f"{path}: entry {name!r} has unknown dtype code {code}")
        dtype = _DTYPE_CODES[code]
        raw, pos = take(pos, 4 * ndim, f"entry {name!r} dims")
        shape = struct.unpack(f"<{ndim}I", raw)
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        raw, pos = take(pos, nbytes, f"entry {name!r} payload")
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        out[name] = arr.astype(arr.dtype.newbyteorder("="), copy=False)
    return out
