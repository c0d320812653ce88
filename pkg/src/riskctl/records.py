"""Deterministic binary container: JSON metadata plus named float64 arrays.

Used for checkpoints and run records.  The byte layout depends only on
content (sorted JSON keys, sorted array names, little-endian), so equal
records serialize to equal bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError

_MAGIC = b"RKR1"


def pack_record(meta: dict, arrays: dict) -> bytes:
    out = [_MAGIC]
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    out.append(struct.pack("<I", len(blob)))
    out.append(blob)
    out.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        nb = name.encode()
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        out.append(arr.tobytes())
    return b"".join(out)


def unpack_record(raw: bytes) -> tuple[dict, dict]:
    view = memoryview(raw)
    if bytes(view[:4]) != _MAGIC:
        raise DataError("not a record file (bad magic)")
    off = 4

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(view):
            raise DataError("truncated record")
        chunk = view[off:off + n]
        off += n
        return chunk

    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(meta_len)).decode())
    (n_arrays,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()
    return meta, arrays


def write_record(path: str, meta: dict, arrays: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(pack_record(meta, arrays))


def read_record(path: str) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        return unpack_record(fh.read())
