"""Flat binary tensor files and directory checkpoints built from them.

Layout of one tensor file: 4 magic bytes ``VRT1``, a little-endian u32
rank, ``rank`` little-endian u32 extents, then the element payload as
little-endian f32 in row-major order. The same container carries weights,
embeddings, and heatmaps.

A checkpoint is a directory of such files plus ``index.txt``, one
``<parameter name>\\t<file name>`` line per tensor in parameter order.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, TruncatedError

MAGIC = b"VRT1"
INDEX_NAME = "index.txt"

__all__ = [
    "MAGIC",
    "INDEX_NAME",
    "write_tensor",
    "read_tensor",
    "tensor_bytes",
    "tensor_from_bytes",
    "save_checkpoint",
    "load_checkpoint",
]


def tensor_bytes(arr: np.ndarray) -> bytes:
    # note: ascontiguousarray would bump rank 0 to rank 1
    arr = np.asarray(arr, dtype="<f4")
    if not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def tensor_from_bytes(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 8:
        raise TruncatedError(f"{source}: too short for a tensor header")
    if blob[:4] != MAGIC:
        raise FormatError(f"{source}: unsupported magic bytes {blob[:4]!r}")
    (rank,) = struct.unpack_from("<I", blob, 4)
    offset = 8 + 4 * rank
    if len(blob) < offset:
        raise TruncatedError(f"{source}: extents cut off (rank {rank})")
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = offset + 4 * count
    if len(blob) < expected:
        raise TruncatedError(
            f"{source}: payload has {len(blob) - offset} bytes, "
            f"shape {shape} needs {4 * count}"
        )
    flat = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return flat.reshape(shape).astype(np.float32, copy=True)


def write_tensor(path: str | os.PathLike, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_bytes(arr))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    return tensor_from_bytes(path.read_bytes(), source=str(path))


def save_checkpoint(dirpath: str | os.PathLike, tensors: dict[str, np.ndarray]) -> None:
    """Write every named tensor plus the index; file names follow index order."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (name, arr) in enumerate(tensors.items()):
        if "\t" in name or "\n" in name:
            raise FormatError(f"parameter name {name!r} cannot be indexed")
        fname = f"t{i:05d}.vrt"
        write_tensor(d / fname, arr)
        lines.append(f"{name}\t{fname}\n")
    (d / INDEX_NAME).write_text("".join(lines), encoding="utf-8")


def load_checkpoint(dirpath: str | os.PathLike) -> dict[str, np.ndarray]:
    d = Path(dirpath)
    index = d / INDEX_NAME
    if not index.is_file():
        raise FormatError(f"{d}: not a checkpoint directory (missing {INDEX_NAME})")
    out: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(index.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            name, fname = line.split("\t")
        except ValueError:
            raise FormatError(f"{index}:{lineno}: malformed index line {line!r}")
        if name in out:
            raise FormatError(f"{index}:{lineno}: duplicate parameter name {name!r}")
        out[name] = read_tensor(d / fname)
    return out
