"""Deterministic binary container for checkpoints.

Identical contents produce identical bytes: metadata is canonical JSON
(sorted keys), arrays are written in sorted name order as C-contiguous
little-endian buffers, and nothing time- or path-dependent enters the file.
That property is what makes "two runs with one seed give one checkpoint"
testable at the byte level.

Layout:
    magic  b"SSCL"
    u32    format version
    u64    metadata length, then that many UTF-8 JSON bytes
    u32    array count, then per array:
      u16 name length, name bytes
      u16 dtype-string length, dtype bytes (numpy dtype.str, e.g. "<f8")
      u8  ndim, u64 per dimension
      u64 payload length, raw C-order bytes
"""

import json
import struct

import numpy as np

from .core import DataError

MAGIC = b"SSCL"
FORMAT_VERSION = 1


def write_container(path, meta, arrays):
    """Write metadata (JSON-serializable dict) and named float/int arrays."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", FORMAT_VERSION)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    blob += struct.pack("<Q", len(meta_bytes))
    blob += meta_bytes
    names = sorted(arrays)
    blob += struct.pack("<I", len(names))
    for name in names:
        arr = np.asarray(arrays[name], order="C")  # keeps 0-d arrays 0-d
        nb = name.encode()
        dt = arr.dtype.str.encode()
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<H", len(dt)) + dt
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<Q", dim)
        payload = arr.tobytes()
        blob += struct.pack("<Q", len(payload))
        blob += payload
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def read_container(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read container {path}: {exc}") from exc
    try:
        if data[:4] != MAGIC:
            raise DataError(f"{path}: not a checkpoint container")
        (version,) = struct.unpack_from("<I", data, 4)
        if version != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported container version {version}")
        off = 8
        (meta_len,) = struct.unpack_from("<Q", data, off)
        off += 8
        meta = json.loads(data[off : off + meta_len].decode())
        off += meta_len
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + nlen].decode()
            off += nlen
            (dlen,) = struct.unpack_from("<H", data, off)
            off += 2
            dtype = np.dtype(data[off : off + dlen].decode())
            off += dlen
            (ndim,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = []
            for _ in range(ndim):
                (dim,) = struct.unpack_from("<Q", data, off)
                off += 8
                shape.append(dim)
            (plen,) = struct.unpack_from("<Q", data, off)
            off += 8
            arrays[name] = np.frombuffer(
                data[off : off + plen], dtype=dtype).reshape(shape).copy()
            off += plen
        if off != len(data):
            raise DataError(f"{path}: trailing bytes after last array")
        return meta, arrays
    except (struct.error, json.JSONDecodeError, ValueError, IndexError) as exc:
        raise DataError(f"{path}: corrupt container: {exc}") from exc
