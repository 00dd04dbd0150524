"""Binary container for named float32 tensors.

Layout, all integers little-endian u32:

    magic "OMGT" | version | count
    per entry: name_len | name (UTF-8) | rank | dims... | raw float32 values

Entry order is preserved on load, so loading a file and saving it again
reproduces the payload byte for byte.
"""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict

import numpy as np

from .errors import ParseError

MAGIC = b"OMGT"
VERSION = 1


def save_tensors(path, tensors: "OrderedDict[str, np.ndarray]"):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_tensors(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ParseError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    offset = 4
    try:
        version, count = struct.unpack_from("<II", raw, offset)
        offset += 8
        if version != VERSION:
            raise ParseError(f"unsupported container version {version}")
        out = OrderedDict()
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", raw, offset)
            offset += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=offset).reshape(dims)
            offset += 4 * n
            out[name] = arr.copy()
    except struct.error as exc:
        raise ParseError(f"truncated container: {exc}") from exc
    if offset != len(raw):
        raise ParseError(f"{len(raw) - offset} trailing bytes after last entry")
    return out


def checksum(arrays) -> str:
    """Stable hex digest over an iterable of (name, ndarray) pairs."""
    h = hashlib.sha256()
    for name, arr in arrays:
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()
