"""DAEC checkpoint files.

Layout (little-endian)::

    "DAEC" | u32 version | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | f32 payload

Optimizer state is stored as ordinary tensors whose names start with ``opt.``.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .volume import FormatError

MAGIC = b"DAEC"
VERSION = 1
OPT_PREFIX = "opt."


def save_checkpoint(path, tensors, optimizer=None):
    items = list(tensors.items())
    if optimizer:
        items += [(OPT_PREFIX + k, v) for k, v in optimizer.items()]
    chunks = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, value in items:
        arr = np.asarray(value, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path):
    """Returns ``(tensors, optimizer_state)``; the latter is empty when absent."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}", 0)
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header", len(raw))
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 4)
    pos = 12
    tensors, opt = OrderedDict(), OrderedDict()
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(raw):
                raise FormatError(f"{path}: truncated payload for {name!r}", pos)
            arr = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            target = opt if name.startswith(OPT_PREFIX) else tensors
            target[name[len(OPT_PREFIX):] if target is opt else name] = arr.astype(np.float32)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated record", pos) from exc
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes", pos)
    return tensors, opt
