"""Binary checkpoint format.

Layout (little-endian): magic ``b"G2CK"``, u32 version, u32 parameter-blob
count, parameter blobs, u32 optimizer-blob count, optimizer blobs.  A blob
is u32 name length, UTF-8 name, u32 rank, rank x u32 extents, then the
row-major float64 values.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"G2CK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_blobs(fh, arrays: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")  # not ascontiguousarray: it promotes 0-d to 1-d
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def _read_blobs(buf: memoryview, pos: int) -> tuple[dict[str, np.ndarray], int]:
    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (count,) = take("<I")
    arrays = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = bytes(buf[pos : pos + nlen]).decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    return arrays, pos


def save_checkpoint(path, params: dict[str, np.ndarray], optimizer: dict[str, np.ndarray] | None = None) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        _write_blobs(fh, params)
        _write_blobs(fh, optimizer or {})
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    buf = memoryview(data)
    try:
        params, pos = _read_blobs(buf, 8)
        optimizer, pos = _read_blobs(buf, pos)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    return params, optimizer
