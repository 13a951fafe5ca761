"""Binary parameter container.

Layout, all integers unsigned 64-bit little-endian::

    b"SPIOPT1\\0"
    repeated until EOF:
        name_length, name (UTF-8 bytes)
        rank, dims[rank]
        values: prod(dims) float64 little-endian, row-major
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SPIOPT1\0"
_U64 = struct.Struct("<Q")


class ContainerError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC]
    for name, value in arrays.items():
        value = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(_U64.pack(len(raw)))
        chunks.append(raw)
        chunks.append(_U64.pack(value.ndim))
        chunks.extend(_U64.pack(d) for d in value.shape)
        chunks.append(np.ascontiguousarray(value).tobytes())
    return b"".join(chunks)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[: len(MAGIC)] != MAGIC:
        raise ContainerError("not a parameter container (bad magic)")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}

    def u64() -> int:
        nonlocal pos
        if pos + 8 > len(buf):
            raise ContainerError("truncated container")
        (v,) = _U64.unpack_from(buf, pos)
        pos += 8
        return v

    while pos < len(buf):
        n = u64()
        if pos + n > len(buf):
            raise ContainerError("truncated container")
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        dims = tuple(u64() for _ in range(u64()))
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        end = pos + 8 * count
        if end > len(buf):
            raise ContainerError(f"truncated values for {name!r}")
        out[name] = np.frombuffer(buf[pos:end], dtype="<f8").astype(np.float64).reshape(dims)
        pos = end
    return out


def atomic_write(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, arrays: Mapping[str, np.ndarray]) -> None:
    atomic_write(path, dumps(arrays))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
