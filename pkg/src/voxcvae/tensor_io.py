"""TNSR: a little-endian single-tensor file.

Layout: magic ``TNSR``, version u32, rank u32, one u32 per extent, then the
float32 payload in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"TNSR"
VERSION = 1


class FormatError(ValueError):
    """A file does not match its declared binary layout."""


def tnsr_bytes(t) -> bytes:
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f4", order="C")
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def parse_tnsr(buf: bytes, source: str = "<bytes>") -> Tensor:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise FormatError(f"{source}: not a TNSR file")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"{source}: unsupported TNSR version {version}")
    off = 12
    if len(buf) < off + 4 * rank:
        raise FormatError(f"{source}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    count = int(np.prod(shape)) if rank else 1
    if len(buf) != off + 4 * count:
        raise FormatError(f"{source}: expected {4 * count} payload bytes, found {len(buf) - off}")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(shape)
    return Tensor(data)


def save_tnsr(t, path) -> None:
    Path(path).write_bytes(tnsr_bytes(t))


def load_tnsr(path) -> Tensor:
    path = Path(path)
    return parse_tnsr(path.read_bytes(), str(path))
