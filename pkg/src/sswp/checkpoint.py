"""Named-tensor binary checkpoint format.

Layout (little-endian)::

    b"SSWP" | u32 version | u32 count
    per entry: u16 name_len | name (utf-8) | u8 dtype | u8 rank | u32 dims[rank] | raw data

dtype codes: 0 = f32, 1 = f64, 2 = u8 (opaque byte blobs such as ``meta.config``).
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"SSWP"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("uint8"): 2}


class CheckpointError(ValueError):
    pass


class IncompatibleCheckpoint(CheckpointError):
    """Tensor names or shapes do not match what the model expects."""

    def __init__(self, problems: list[str]):
        super().__init__("incompatible checkpoint: " + "; ".join(problems))
        self.problems = problems


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError("bad magic; not an SSWP checkpoint")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + nlen].decode("utf-8")
            off += nlen
            code, rank = struct.unpack_from("<BB", buf, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            dt = _DTYPES[code]
            n = int(np.prod(dims)) if rank else 1
            nbytes = n * dt.itemsize
            if off + nbytes > len(buf):
                raise CheckpointError(f"truncated data for tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(dims).copy()
            off += nbytes
    except (struct.error, KeyError) as e:
        raise CheckpointError(f"corrupt checkpoint: {e}") from None
    return out


def save(path, tensors: Mapping[str, np.ndarray]):
    Path(path).write_bytes(encode(tensors))


def load(path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def pack_text(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).copy()


def unpack_text(arr: np.ndarray) -> str:
    return arr.astype(np.uint8).tobytes().decode("utf-8")
