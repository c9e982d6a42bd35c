"""Binary tensor snapshots and named-tensor checkpoints.

Snapshot layout (little endian)::

    b"MSBT" | u32 N | u32 C | u32 H | u32 W | N*C*H*W float32, W fastest

Checkpoint layout: a sequence of ``u32 name_len | utf-8 name | snapshot``
records until end of file.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .errors import CorruptionError, ShapeError

MAGIC = b"MSBT"
_DIMS = struct.Struct("<4I")
_NAME_LEN = struct.Struct("<I")


def _as_rank4(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim > 4:
        raise ShapeError(f"snapshots hold at most rank 4, got shape {arr.shape}")
    # lower-rank tensors are left-padded with unit dims; readers reshape by name
    return arr.reshape((1,) * (4 - arr.ndim) + arr.shape)


def write_snapshot(stream: BinaryIO, arr: np.ndarray) -> None:
    arr = _as_rank4(arr)
    stream.write(MAGIC)
    stream.write(_DIMS.pack(*arr.shape))
    stream.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_snapshot(stream: BinaryIO) -> np.ndarray:
    magic = stream.read(4)
    if magic != MAGIC:
        raise CorruptionError(f"bad snapshot magic {magic!r}")
    header = stream.read(_DIMS.size)
    if len(header) != _DIMS.size:
        raise CorruptionError("truncated snapshot header")
    dims = _DIMS.unpack(header)
    count = int(np.prod(dims))
    payload = stream.read(4 * count)
    if len(payload) != 4 * count:
        raise CorruptionError(f"snapshot payload truncated: expected {count} values")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def save_tensor(path: str | Path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_snapshot(f, arr)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_snapshot(f)


def dumps_checkpoint(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    for name in sorted(tensors):
        raw = name.encode("utf-8")
        buf.write(_NAME_LEN.pack(len(raw)))
        buf.write(raw)
        write_snapshot(buf, tensors[name])
    return buf.getvalue()


def loads_checkpoint(data: bytes) -> dict[str, np.ndarray]:
    buf = io.BytesIO(data)
    out: dict[str, np.ndarray] = {}
    while True:
        head = buf.read(_NAME_LEN.size)
        if not head:
            return out
        if len(head) != _NAME_LEN.size:
            raise CorruptionError("truncated checkpoint record header")
        (n,) = _NAME_LEN.unpack(head)
        raw = buf.read(n)
        if len(raw) != n:
            raise CorruptionError("truncated checkpoint tensor name")
        out[raw.decode("utf-8")] = read_snapshot(buf)


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps_checkpoint(tensors))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return loads_checkpoint(Path(path).read_bytes())
