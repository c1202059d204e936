"""Binary tensor files, checkpoint containers, and atomic writes.

Single-tensor format (``.qten``): magic bytes ``QTEN``, little-endian u32
rank, ``rank`` little-endian u32 dims, then the row-major float32
little-endian payload.

Checkpoint container (``.qtck``): magic ``QTCK``, u32 format version, u32
metadata length + UTF-8 JSON metadata, u32 tensor count, then per tensor
a u32 name length, the UTF-8 name, and an embedded ``QTEN`` record.
Entries are written in sorted name order so equal content means equal
bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError

QTEN_MAGIC = b"QTEN"
CKPT_MAGIC = b"QTCK"
CKPT_VERSION = 1
_MAX_RANK = 32


def atomic_write_bytes(path, data):
    """Write via a temp file in the same directory, then rename."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def qten_bytes(arr):
    arr = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
    header = QTEN_MAGIC + struct.pack("<I", arr.ndim)
    if arr.ndim:
        header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def parse_qten(buf, offset=0, name="tensor"):
    """Decode one QTEN record from ``buf``; returns (array, next offset)."""
    if len(buf) - offset < 8:
        raise FormatError(f"{name}: truncated header")
    if buf[offset:offset + 4] != QTEN_MAGIC:
        raise FormatError(f"{name}: bad magic {buf[offset:offset + 4]!r}")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    if rank > _MAX_RANK:
        raise FormatError(f"{name}: implausible rank {rank}")
    pos = offset + 8
    if len(buf) - pos < 4 * rank:
        raise FormatError(f"{name}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", buf, pos) if rank else ()
    if any(d < 1 for d in dims):
        raise FormatError(f"{name}: zero dimension in {dims}")
    pos += 4 * rank
    count = 1
    for d in dims:
        count *= d
    nbytes = 4 * count
    if len(buf) - pos < nbytes:
        raise FormatError(f"{name}: payload truncated ({len(buf) - pos} of {nbytes} bytes)")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
    return arr, pos + nbytes


def write_qten(path, arr):
    atomic_write_bytes(path, qten_bytes(arr))


def read_qten(path):
    with open(path, "rb") as f:
        buf = f.read()
    arr, end = parse_qten(buf, name=os.fspath(path))
    if end != len(buf):
        raise FormatError(f"{os.fspath(path)}: {len(buf) - end} trailing bytes")
    return arr


def checkpoint_bytes(tensors, meta):
    meta_json = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION),
             struct.pack("<I", len(meta_json)), meta_json,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(qten_bytes(tensors[name]))
    return b"".join(parts)


def write_checkpoint(path, tensors, meta):
    atomic_write_bytes(path, checkpoint_bytes(tensors, meta))


def read_checkpoint(path):
    """Returns ``(tensors: dict[str, ndarray], meta: dict)``."""
    path = os.fspath(path)
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 16 or buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint container")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    (meta_len,) = struct.unpack_from("<I", buf, 8)
    pos = 12
    if len(buf) - pos < meta_len:
        raise FormatError(f"{path}: truncated metadata")
    try:
        meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad metadata: {e}") from None
    pos += meta_len
    if len(buf) - pos < 4:
        raise FormatError(f"{path}: truncated tensor count")
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        if len(buf) - pos < 4:
            raise FormatError(f"{path}: truncated entry header")
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if len(buf) - pos < name_len:
            raise FormatError(f"{path}: truncated entry name")
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        arr, pos = parse_qten(buf, pos, name=f"{path}:{name}")
        tensors[name] = arr
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return tensors, meta
