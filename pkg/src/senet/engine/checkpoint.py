"""SENETCKP tensor container.

Layout (little-endian)::

    b"SENETCKP" | version u16 | count u32
    per tensor: name_len u16 | name utf-8 | rank u8 | dims u32*rank | f32 payload
"""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SENETCKP"
VERSION = 1


class FormatError(ValueError):
    pass


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise FormatError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:8] != MAGIC:
        raise FormatError("missing SENETCKP magic")
    off = 8
    try:
        version, count = struct.unpack_from("<HI", buf, off)
        off += 6
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if off + 4 * size > len(buf):
                raise FormatError(f"tensor {name!r} truncated at byte {off}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
            off += 4 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"truncated checkpoint at byte {off}") from exc
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes after last tensor")
    return out


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    atomic_write_bytes(path, encode_checkpoint(tensors))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
