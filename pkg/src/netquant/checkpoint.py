"""NQCK parameter checkpoints.

Layout (little-endian)::

    "NQCK" | version u16 | section count u32 | meta length u32 | meta (UTF-8 JSON)
    per section: name length u16 | name | rows u32 | cols u32 | rows*cols float32

Sections are written in the order given, so identical inputs give identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"NQCK"
VERSION = 1
_HEAD = struct.Struct("<4sHII")
_SEC = struct.Struct("<II")


class CheckpointError(ValueError):
    pass


def encode_sections(sections: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    meta_raw = json.dumps(meta or {}, sort_keys=True).encode()
    parts = [_HEAD.pack(MAGIC, VERSION, len(sections), len(meta_raw)), meta_raw]
    for name, arr in sections.items():
        a = np.asarray(arr, dtype="<f4")
        if a.ndim != 2:
            a = a.reshape(1, -1) if a.ndim < 2 else a.reshape(a.shape[0], -1)
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(_SEC.pack(*a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def decode_sections(raw: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if len(raw) < _HEAD.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, count, meta_len = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError("not an NQCK checkpoint")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = _HEAD.size
    meta = json.loads(raw[pos:pos + meta_len].decode())
    pos += meta_len
    sections = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        rows, cols = _SEC.unpack_from(raw, pos)
        pos += _SEC.size
        nbytes = rows * cols * 4
        if pos + nbytes > len(raw):
            raise CheckpointError(f"section {name!r} truncated")
        sections[name] = np.frombuffer(raw, dtype="<f4", count=rows * cols,
                                       offset=pos).reshape(rows, cols).astype(np.float32)
        pos += nbytes
    if pos != len(raw):
        raise CheckpointError("trailing bytes after last section")
    return sections, meta


def write_checkpoint(path, sections, meta=None):
    Path(path).write_bytes(encode_sections(sections, meta))


def read_checkpoint(path):
    return decode_sections(Path(path).read_bytes())
