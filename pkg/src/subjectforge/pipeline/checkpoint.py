"""Self-checking binary checkpoint format.

Layout, all integers little-endian:

    magic "SFRG" | u32 version | u8 stage-len + stage | u64 step
    | 32-byte config hash | u32 tensor count
    | per tensor: u16 name-len + name, u8 dtype code, u8 rank,
      u64 dims..., raw little-endian data
    | trailing sha256 over everything above

A flipped byte anywhere fails the trailing checksum, so a loaded checkpoint
is either bit-exact or rejected.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"SFRG"
VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1,
                np.dtype(np.int64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class CheckpointHeader:
    stage: str
    step: int
    config_hash: bytes


def _le(arr: np.ndarray) -> np.ndarray:
    if arr.dtype.byteorder == ">":
        return arr.astype(arr.dtype.newbyteorder("<"))
    return np.ascontiguousarray(arr)


def serialize(stage: str, step: int, config_hash: bytes,
              tensors: dict[str, np.ndarray]) -> bytes:
    if len(config_hash) != 32:
        raise CheckpointError("config hash must be 32 bytes")
    stage_b = stage.encode()
    if len(stage_b) > 255:
        raise CheckpointError("stage id too long")
    parts = [MAGIC, struct.pack("<I", VERSION),
             struct.pack("<B", len(stage_b)), stage_b,
             struct.pack("<Q", step), config_hash,
             struct.pack("<I", len(tensors))]
    # canonical name order, so equal contents give equal bytes
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} "
                                  f"for {name!r}")
        name_b = name.encode()
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(_le(arr).tobytes(order="C"))
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize(blob: bytes) -> tuple[CheckpointHeader,
                                      dict[str, np.ndarray]]:
    if len(blob) < 36:
        raise CheckpointError("truncated checkpoint")
    body, checksum = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != checksum:
        raise CheckpointError("checksum mismatch")
    r = _Reader(body)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    (stage_len,) = r.unpack("<B")
    stage = r.take(stage_len).decode()
    (step,) = r.unpack("<Q")
    config_hash = r.take(32)
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        code, rank = r.unpack("<BB")
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise CheckpointError(f"unknown dtype code {code}")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize \
            if rank else dtype.itemsize
        data = np.frombuffer(r.take(n_bytes), dtype=dtype).reshape(dims)
        tensors[name] = data.copy()
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    return CheckpointHeader(stage=stage, step=step,
                            config_hash=config_hash), tensors


def save_checkpoint(path, stage: str, step: int, config_hash: bytes,
                    tensors: dict[str, np.ndarray]) -> None:
    blob = serialize(stage, step, config_hash, tensors)
    with open(path, "wb") as f:
        f.write(blob)


def load_checkpoint(path) -> tuple[CheckpointHeader, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        return deserialize(f.read())
