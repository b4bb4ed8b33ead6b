"""Binary checkpoint format for named tensors.

Layout: magic "FROC", format version (u32 LE), tensor count (u32 LE),
then per tensor: id length (u32 LE), UTF-8 id, dtype tag (u8: 0=fp32,
1=fp64), rank (u8), dims (u64 LE each), raw little-endian values.  A
CRC32 (u32 LE) of everything between the magic and the checksum closes
the file.  Writing the same tensors twice produces identical bytes.
"""

import struct
import zlib

import numpy as np

from .errors import CheckpointError

MAGIC = b"FROC"
FORMAT_VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_checkpoint(path, tensors):
    """Write an ordered mapping of id -> float array."""
    seen = set()
    payload = bytearray()
    payload += struct.pack("<I", FORMAT_VERSION)
    payload += struct.pack("<I", len(tensors))
    for tid, arr in tensors.items():
        if tid in seen:
            raise CheckpointError(f"duplicate tensor id {tid!r}")
        seen.add(tid)
        arr = np.asarray(arr)
        tag = _TAG_FOR_KIND.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"tensor {tid!r} has unsupported dtype {arr.dtype}; only fp32/fp64 are stored")
        encoded = tid.encode("utf-8")
        payload += struct.pack("<I", len(encoded))
        payload += encoded
        payload += struct.pack("<BB", tag, arr.ndim)
        payload += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        payload += np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def load_checkpoint(path):
    """Read a checkpoint back into an ordered dict of id -> array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 12 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    payload, crc_bytes = blob[len(MAGIC) : -4], blob[-4:]
    (stored_crc,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError(f"{path}: CRC mismatch, file is corrupt")

    off = 0

    def read(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(payload):
            raise CheckpointError(f"{path}: truncated payload")
        vals = struct.unpack_from(fmt, payload, off)
        off += size
        return vals

    (version,) = read("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (count,) = read("<I")
    out = {}
    for _ in range(count):
        (id_len,) = read("<I")
        if off + id_len > len(payload):
            raise CheckpointError(f"{path}: truncated tensor id")
        tid = payload[off : off + id_len].decode("utf-8")
        off += id_len
        tag, rank = read("<BB")
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for {tid!r}")
        dims = read(f"<{rank}Q") if rank else ()
        dtype = _DTYPE_TAGS[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if off + nbytes > len(payload):
            raise CheckpointError(f"{path}: truncated tensor data for {tid!r}")
        arr = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=off).reshape(dims)
        off += nbytes
        if tid in out:
            raise CheckpointError(f"{path}: duplicate tensor id {tid!r}")
        out[tid] = arr.astype(dtype.newbyteorder("="))
    if off != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - off} trailing bytes after last tensor")
    return out
