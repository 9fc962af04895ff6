"""Binary tensor checkpoints.

Layout, all little-endian:

    u64                 tensor count
    per tensor:
        u8              rank
        u64 * rank      dims
        f64 * prod(dims)  values, C order

Tensors are positional; callers that need names keep a separate ordered
manifest. The format has no alignment padding and no trailing bytes.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .exceptions import FormatError

__all__ = ["save_tensors", "load_tensors", "atomic_write_bytes", "atomic_write_text"]

_MAX_RANK = 32


def atomic_write_bytes(path, data: bytes) -> None:
    """Write-then-rename so readers never observe a partial file."""
    path = Path(path)
    tmp = path.with_name(f"{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def save_tensors(path, tensors) -> None:
    """Write a sequence of float64 arrays to path in checkpoint format (atomically)."""
    # np.ascontiguousarray would widen rank-0 tensors to shape (1,)
    tensors = [np.array(t, dtype=np.float64, order="C", copy=None) for t in tensors]
    parts = [struct.pack("<Q", len(tensors))]
    for t in tensors:
        parts.append(struct.pack("<B", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        parts.append(t.astype("<f8", copy=False).tobytes(order="C"))
    atomic_write_bytes(path, b"".join(parts))


def load_tensors(path) -> list[np.ndarray]:
    """Read a checkpoint written by save_tensors.

    Raises FormatError naming the byte offset when the file is truncated
    or structurally invalid.
    """
    data = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(
                f"checkpoint truncated at byte {len(data)}: needed {n} bytes for {what} at offset {pos}"
            )
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<Q", take(8, "tensor count"))
    tensors = []
    for i in range(count):
        (rank,) = struct.unpack("<B", take(1, f"rank of tensor {i}"))
        if rank > _MAX_RANK:
            raise FormatError(f"tensor {i} at offset {pos - 1} declares rank {rank}, limit is {_MAX_RANK}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"dims of tensor {i}")) if rank else ()
        n = 1
        for d in dims:
            n *= d
        raw = take(8 * n, f"values of tensor {i}")
        tensors.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims))
    if pos != len(data):
        raise FormatError(f"checkpoint has {len(data) - pos} trailing bytes at offset {pos}")
    return tensors
