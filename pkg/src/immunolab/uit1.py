"""UIT1 binary tensor files and named-tensor checkpoints.

A UIT1 record is ``b"UIT1"``, a little-endian u32 rank, ``rank`` u32 dims,
then the values as little-endian float32 in row-major order.

A checkpoint is ``b"UICK"``, a u32 byte length, a UTF-8 JSON manifest of
that length, then one UIT1 record per entry of ``manifest["tensors"]`` in
order. The manifest lists each tensor's name and shape.
"""

from __future__ import annotations

import io
import json
import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"UIT1"
CHECKPOINT_MAGIC = b"UICK"


class FormatError(ValueError):
    """Raised for malformed UIT1 or checkpoint data."""


def write_tensor(fh: BinaryIO, array) -> None:
    arr = np.array(array, dtype="<f4", order="C")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh: BinaryIO) -> np.ndarray:
    start = fh.tell() if fh.seekable() else 0
    magic = fh.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte {start}")
    raw = fh.read(4)
    if len(raw) != 4:
        raise FormatError(f"truncated rank at byte {start + 4}")
    (rank,) = struct.unpack("<I", raw)
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise FormatError(f"truncated dims at byte {start + 8}")
    dims = struct.unpack(f"<{rank}I", raw)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError(
            f"truncated payload at byte {start + 8 + 4 * rank}: expected {4 * count} bytes, got {len(payload)}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def save_tensor(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    manifest = dict(meta or {})
    manifest["tensors"] = [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()]
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(head)))
    buf.write(head)
    for v in tensors.values():
        write_tensor(buf, v)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {magic!r} at byte 0")
        raw = fh.read(4)
        if len(raw) != 4:
            raise FormatError(f"{path}: truncated manifest length at byte 4")
        (n,) = struct.unpack("<I", raw)
        head = fh.read(n)
        if len(head) != n:
            raise FormatError(f"{path}: truncated manifest at byte 8")
        manifest = json.loads(head.decode("utf-8"))
        tensors = {}
        for entry in manifest["tensors"]:
            arr = read_tensor(fh)
            if list(arr.shape) != list(entry["shape"]):
                raise FormatError(f"{path}: tensor {entry['name']} has shape {arr.shape}, manifest says {entry['shape']}")
            tensors[entry["name"]] = arr
    return tensors, manifest
