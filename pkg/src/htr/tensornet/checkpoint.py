"""Versioned key -> shape -> values checkpoint files.

Layout (all integers little-endian):

    b"HTRCKPT\n"                 magic
    u32 format version
    u32 entry count
    per entry:
        u32 name length, utf-8 name
        u32 ndim, ndim x u64 shape
        f64 values, C order

Values are stored as raw IEEE doubles, so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from htr.errors import InvalidArgumentError

MAGIC = b"HTRCKPT\n"
FORMAT_VERSION = 1


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path: Union[str, Path]) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise InvalidArgumentError(f"{path}: not a checkpoint file")
    off = len(MAGIC)
    version, count = struct.unpack_from("<II", buf, off)
    off += 8
    if version != FORMAT_VERSION:
        raise InvalidArgumentError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
    return out
