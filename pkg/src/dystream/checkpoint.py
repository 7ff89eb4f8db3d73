"""Checkpoint container: magic "DYST", config block, named f32 tensor table.

Parameters live on the float32 grid in memory (see :mod:`dystream.optim`),
so ``load(save(x))`` reproduces every tensor bitwise and the file itself is
byte-stable: saving a loaded checkpoint reproduces the original bytes.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

_MAGIC = b"DYST"
_VERSION = 1


def save(path: str | Path, config: dict[str, str], tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<H", _VERSION))
    cfg_block = "".join(f"{k}={v}\n" for k, v in sorted(config.items())).encode()
    buf.write(struct.pack("<I", len(cfg_block)))
    buf.write(cfg_block)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        name_b = name.encode()
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<B", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<I", d))
        buf.write(arr.astype("<f4").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())
    return path


def load(path: str | Path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    buf = io.BytesIO(raw)
    if buf.read(4) != _MAGIC:
        raise ValueError(f"{path}: not a DYST checkpoint")
    (version,) = struct.unpack("<H", buf.read(2))
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", buf.read(4))
    config = {}
    for line in buf.read(cfg_len).decode().splitlines():
        key, _, value = line.partition("=")
        config[key] = value
    (count,) = struct.unpack("<I", buf.read(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", buf.read(2))
        name = buf.read(name_len).decode()
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = tuple(struct.unpack("<I", buf.read(4))[0] for _ in range(ndim))
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(buf.read(n * 4), dtype="<f4")
        tensors[name] = data.reshape(shape).astype(np.float64)
    return config, tensors
