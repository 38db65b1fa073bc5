"""Binary parameter snapshots.

Layout: the magic bytes ``FFT1`` followed by one record per tensor::

    u32 name_len | name (utf-8) | u32 rank | rank x u64 extents | float32 values

All integers and floats are little-endian.  Records run to end of file.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"FFT1"


class SnapshotFormatError(ValueError):
    def __init__(self, msg, offset):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


def encode(tensors) -> bytes:
    parts = [MAGIC]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict:
    if buf[:4] != MAGIC:
        raise SnapshotFormatError("bad magic, expected b'FFT1'", 0)
    out = {}
    pos = 4
    end = len(buf)

    def take(n, what):
        nonlocal pos
        if pos + n > end:
            raise SnapshotFormatError(f"truncated {what}: need {n} bytes, have {end - pos}", pos)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    while pos < end:
        start = pos
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise SnapshotFormatError("name is not valid utf-8", start + 4) from None
        (rank,) = struct.unpack("<I", take(4, "rank"))
        if rank > 16:
            raise SnapshotFormatError(f"implausible rank {rank} for {name!r}", pos - 4)
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, "extents"))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        values = np.frombuffer(take(4 * count, f"values of {name!r}"), dtype="<f4")
        if name in out:
            raise SnapshotFormatError(f"duplicate tensor name {name!r}", start)
        out[name] = values.astype(np.float32).reshape(shape)
    return out


def save_snapshot(path, tensors):
    data = encode(tensors)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_snapshot(path) -> dict:
    with open(path, "rb") as fh:
        return decode(fh.read())
