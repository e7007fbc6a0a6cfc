"""CVAE checkpoint files.

Layout (little-endian): magic ``CVAE``, version u32, u32 byte length of a
UTF-8 block of ``key=value`` config lines, parameter count u32, then per
entry: name length u16, name, rank u32, extents (u32 each), float32 payload.
Entries are the trainable parameters in construction order followed by the
batch-norm running means and variances.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import CVAE, ModelConfig
from .tensor_io import FormatError

MAGIC = b"CVAE"
VERSION = 1


def _entries(model: CVAE):
    for name, p in model.params.items():
        yield name, p.data
    for name, st in model.bn.items():
        yield f"{name}.running_mean", st.running_mean
        yield f"{name}.running_var", st.running_var


def checkpoint_bytes(model: CVAE) -> bytes:
    text = "".join(f"{k}={v}\n" for k, v in model.config.to_items()).encode("utf-8")
    entries = list(_entries(model))
    out = [MAGIC, struct.pack("<II", VERSION, len(text)), text, struct.pack("<I", len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def save_checkpoint(model: CVAE, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf, self.off, self.source = buf, 0, source

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise FormatError(f"{self.source}: truncated at byte {self.off} (needed {n} more)")
        chunk = self.buf[self.off : self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(buf: bytes, source: str = "<bytes>", profile: str | None = None) -> CVAE:
    r = _Reader(buf, source)
    if r.take(4) != MAGIC:
        raise FormatError(f"{source}: not a CVAE checkpoint")
    version, text_len = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"{source}: checkpoint version {version}, this build reads {VERSION}")
    items = {}
    for line in r.take(text_len).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        items[key] = value
    config = ModelConfig.from_items(items)
    if profile is not None and profile != config.profile:
        raise ValueError(f"{source}: checkpoint profile {config.profile!r} does not match requested {profile!r}")
    model = CVAE(config, init=False)
    (count,) = r.unpack("<I")
    expected = dict(_entries(model))
    if count != len(expected):
        raise FormatError(f"{source}: {count} entries, model expects {len(expected)}")
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}I")
        if name not in expected:
            raise FormatError(f"{source}: unexpected entry {name!r}")
        target = expected[name]
        if tuple(shape) != target.shape:
            raise FormatError(f"{source}: {name} has shape {shape}, expected {target.shape}")
        nbytes = 4 * int(np.prod(shape)) if rank else 4
        target[...] = np.frombuffer(r.take(nbytes), dtype="<f4").reshape(shape)
    if r.off != len(buf):
        raise FormatError(f"{source}: {len(buf) - r.off} trailing bytes")
    return model


def load_checkpoint(path, profile: str | None = None) -> CVAE:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return parse_checkpoint(path.read_bytes(), str(path), profile)
