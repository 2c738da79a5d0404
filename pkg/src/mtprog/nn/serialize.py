"""Flat binary parameter files.

Layout (little-endian)::

    b"MTPG" | version u32 | count u64
    per record: name_len u32 | name utf-8 | rank u32 | extents u64*rank | float64 data
"""
import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"MTPG"
VERSION = 1


class FormatError(ValueError):
    pass


def save_params(path, arrays) -> None:
    items = list(arrays.items())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(items)))
        for name, arr in items:
            arr = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_params(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}")
    version, count = struct.unpack_from("<IQ", buf, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    pos = 16
    out = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            if pos + 8 * n > len(buf):
                raise FormatError(f"{path}: truncated record {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * n
    except struct.error as exc:
        raise FormatError(f"{path}: truncated file") from exc
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
