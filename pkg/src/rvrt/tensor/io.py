"""Raw tensor files: b"RVT0", u8 rank, u32 LE extents, f32 LE payload."""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"RVT0"


class TensorFileError(ValueError):
    pass


def encode_raw(array) -> bytes:
    a = np.asarray(array)
    if a.ndim > 255:
        raise TensorFileError("rank too large")
    head = MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_raw(buf: bytes) -> np.ndarray:
    if len(buf) < 5:
        raise TensorFileError(f"truncated header at byte {len(buf)}")
    if buf[:4] != MAGIC:
        raise TensorFileError("bad magic at byte 0")
    rank = buf[4]
    end = 5 + 4 * rank
    if len(buf) < end:
        raise TensorFileError(f"truncated extents at byte {len(buf)} (need {end})")
    shape = struct.unpack(f"<{rank}I", buf[5:end])
    n = int(np.prod(shape, dtype=np.int64))
    need = end + 4 * n
    if len(buf) != need:
        raise TensorFileError(f"payload size mismatch at byte {end}: have {len(buf) - end}, need {4 * n}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=end).reshape(shape).astype(np.float32)


def save_raw(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_raw(array))


def load_raw(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_raw(fh.read())
