"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic    8 bytes  b"HGPUCKPT"
    version  u32
    meta_len u32, meta  utf-8 key=value lines
    count    u32
    count x { name_len u16, name utf-8, ndim u8, dims u32[ndim], data f64[prod(dims)] }
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"HGPUCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> bytes:
    meta_text = "".join(f"{k}={v}\n" for k, v in sorted((meta or {}).items())).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_text)), meta_text, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    pos = 8

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, meta_len = take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta_text = data[pos:pos + meta_len].decode()
    pos += meta_len
    meta = dict(line.split("=", 1) for line in meta_text.splitlines() if line)
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = data[pos:pos + name_len].decode()
        pos += name_len
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        if pos + 8 * n > len(data):
            raise CheckpointError(f"truncated tensor {name!r} at byte {pos}")
        tensors[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    return tensors, meta


def save(path: Path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    Path(path).write_bytes(encode(tensors, meta))


def load(path: Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    return decode(Path(path).read_bytes())
