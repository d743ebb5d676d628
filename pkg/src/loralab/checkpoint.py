"""Named-tensor checkpoint container.

Layout (all integers little-endian):
    magic   4 bytes  b"LFLW"
    version u32      currently 1
    count   u32      number of records
    record: name_len u32, name UTF-8, rank u32, dims u32*rank, dtype u8, payload

dtype tags: 0 = float64 array (row-major), 1 = UTF-8 JSON metadata blob
(rank 1, dims = [byte length]). Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InputError

MAGIC = b"LFLW"
VERSION = 1
DTYPE_F64 = 0
DTYPE_JSON = 1

META_PREFIX = "__meta__/"


def save_tensors(path, tensors: dict[str, np.ndarray], meta: dict[str, dict] | None = None) -> None:
    """Write named float64 arrays (plus optional JSON metadata records) to ``path``."""
    records: list[tuple[str, int, bytes, tuple[int, ...]]] = []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=np.float64)
        records.append((name, DTYPE_F64, a.tobytes(), a.shape))
    for name, obj in (meta or {}).items():
        blob = json.dumps(obj, sort_keys=True).encode("utf-8")
        records.append((META_PREFIX + name, DTYPE_JSON, blob, (len(blob),)))

    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(records))
    for name, tag, payload, dims in records:
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<I", len(dims))
        out += struct.pack(f"<{len(dims)}I", *dims) if dims else b""
        out += struct.pack("<B", tag)
        out += payload
    Path(path).write_bytes(bytes(out))


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict[str, dict]]:
    """Read a container back into (tensors, metadata)."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise InputError(f"{path}: not a checkpoint container (bad magic {buf[:4]!r})")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise InputError(f"{path}: unsupported container version {version}")
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, dict] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", buf, pos) if rank else ()
        pos += 4 * rank
        (tag,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        if tag == DTYPE_F64:
            n = int(np.prod(dims, dtype=np.int64)) if dims else 1
            arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(dims)
            tensors[name] = arr.copy()
            pos += 8 * n
        elif tag == DTYPE_JSON:
            (n,) = dims
            meta[name[len(META_PREFIX):]] = json.loads(buf[pos : pos + n].decode("utf-8"))
            pos += n
        else:
            raise InputError(f"{path}: unknown dtype tag {tag} for record {name!r}")
    if pos != len(buf):
        raise InputError(f"{path}: {len(buf) - pos} trailing bytes after last record")
    return tensors, meta
