"""Binary tensor fragments shared by checkpoints and the wire protocol.

One fragment per tensor: [u32 rank][u32 dims...][f32 little-endian values],
all integers little-endian.  Values are always stored single precision
regardless of compute precision, so byte counts are stable.
"""

from __future__ import annotations

import struct

import numpy as np


class FragmentError(ValueError):
    """Malformed fragment bytes."""


def fragment_size(shape: tuple[int, ...]) -> int:
    n = 1
    for d in shape:
        n *= d
    return 4 + 4 * len(shape) + 4 * n


def encode_fragment(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    header = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_fragment(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one fragment starting at offset; returns (array, next offset)."""
    if len(buf) - offset < 4:
        raise FragmentError(f"truncated fragment header at byte {offset}")
    (rank,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    if rank > 8:
        raise FragmentError(f"implausible tensor rank {rank}")
    if len(buf) - offset < 4 * rank:
        raise FragmentError(f"truncated dims at byte {offset}")
    dims = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    count = 1
    for d in dims:
        count *= d
    nbytes = 4 * count
    if len(buf) - offset < nbytes:
        raise FragmentError(f"expected {nbytes} value bytes at {offset}, have {len(buf) - offset}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(dims)
    return arr.copy(), offset + nbytes


def encode_fragments(arrays) -> bytes:
    return b"".join(encode_fragment(a) for a in arrays)


def decode_fragments(buf: bytes, count: int | None = None) -> list[np.ndarray]:
    """Decode fragments until the buffer ends (or exactly `count` of them)."""
    out, offset = [], 0
    while offset < len(buf) and (count is None or len(out) < count):
        arr, offset = decode_fragment(buf, offset)
        out.append(arr)
    if count is not None and len(out) != count:
        raise FragmentError(f"expected {count} fragments, found {len(out)}")
    if count is not None and offset != len(buf):
        raise FragmentError(f"{len(buf) - offset} trailing bytes after {count} fragments")
    return out
