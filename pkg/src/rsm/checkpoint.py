"""RSM1 checkpoint container.

Layout (all integers little-endian uint32)::

    b"RSM1"
    n_lines, then n_lines x (length, UTF-8 "key=value")
    n_tensors, then n_tensors x (name length, name, rank, dims..., float32 LE payload)

Integer-valued state (optimizer step counters, PRNG words) travels in the
key=value block so tensors stay float32 and round-trip bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RSM1"


class CheckpointError(ValueError):
    pass


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def dumps(config: dict, tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC]
    lines = [f"{k}={v}" for k, v in config.items()]
    out.append(_u32(len(lines)))
    for line in lines:
        if "\n" in line:
            raise CheckpointError(f"config line contains a newline: {line!r}")
        raw = line.encode("utf-8")
        out += [_u32(len(raw)), raw]
    out.append(_u32(len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            raise CheckpointError(f"tensor {name} is {arr.dtype}, expected float32")
        raw = name.encode("utf-8")
        out += [_u32(len(raw)), raw, _u32(arr.ndim)]
        out += [_u32(d) for d in arr.shape]
        out.append(arr.astype("<f4", copy=False).tobytes(order="C"))
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def loads(data: bytes) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic, not an RSM1 checkpoint")
    config = {}
    for _ in range(r.u32()):
        line = r.take(r.u32()).decode("utf-8")
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed config line {line!r}")
        config[key] = value
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(dims)) if dims else 1
        buf = r.take(4 * count)
        tensors[name] = np.frombuffer(buf, dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after last tensor")
    return config, tensors


def save(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(config, tensors))


def load(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data)
