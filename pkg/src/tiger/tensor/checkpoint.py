"""Binary checkpoint file.

Layout (all integers little-endian)::

    magic      8 bytes   b"TIGERCKP"
    version    uint32    1
    cfg_len    uint32    length of the UTF-8 JSON config that follows
    cfg        cfg_len bytes
    count      uint32    number of parameters
    then per parameter, in store order:
        name_len  uint16
        name      name_len bytes UTF-8
        ndim      uint8
        dims      ndim x uint32
        data      prod(dims) x float32, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .params import ParameterStore

MAGIC = b"TIGERCKP"
VERSION = 1


def save(path: Union[str, Path], params: ParameterStore, config: dict) -> None:
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load(path: Union[str, Path]) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(config, {name: float32 array})``."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, cfg_len = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    config = json.loads(buf[pos:pos + cfg_len].decode("utf-8"))
    pos += cfg_len
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        dims = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(dims, dtype=np.int64))
        state[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * size
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return config, state
