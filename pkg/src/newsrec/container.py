"""Versioned binary container used for dataset caches, vector caches and checkpoints.

Layout (all integers little-endian)::

    magic       8 bytes   b"NRECBIN\\x00"
    version     u32
    header_len  u64       followed by a UTF-8 JSON header object
    n_sections  u32
    repeated n_sections times:
        name_len    u32, name (UTF-8)
        kind        u8    0 = raw bytes, 1 = JSON, 2 = numpy array (.npy bytes)
        payload_len u64, payload

Nothing in the file depends on wall-clock time, so identical inputs produce
identical bytes.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .errors import StaleCacheError

MAGIC = b"NRECBIN\x00"
VERSION = 1
RAW, JSON, ARRAY = 0, 1, 2


def _dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode_section(value):
    if isinstance(value, np.ndarray):
        buf = io.BytesIO()
        np.save(buf, value, allow_pickle=False)
        return ARRAY, buf.getvalue()
    if isinstance(value, (bytes, bytearray)):
        return RAW, bytes(value)
    return JSON, _dumps(value)


def decode_section(kind, payload):
    if kind == ARRAY:
        return np.load(io.BytesIO(payload), allow_pickle=False)
    if kind == JSON:
        return json.loads(payload.decode("utf-8"))
    return payload


def write_container(path, header, sections):
    """Write ``sections`` (name -> ndarray | bytes | JSON-able) in insertion order."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        hb = _dumps(header)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        fh.write(struct.pack("<I", len(sections)))
        for name, value in sections.items():
            kind, payload = encode_section(value)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", kind))
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise StaleCacheError("truncated container file")
    return data


def read_header(path):
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_header(fh):
    if fh.read(len(MAGIC)) != MAGIC:
        raise StaleCacheError(f"{getattr(fh, 'name', '<stream>')}: not a container file (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(fh, 4))
    if version != VERSION:
        raise StaleCacheError(f"container format version {version} != supported {VERSION}")
    (hlen,) = struct.unpack("<Q", _read_exact(fh, 8))
    return json.loads(_read_exact(fh, hlen).decode("utf-8"))


def read_container(path):
    """Return (header, {name: value})."""
    with open(path, "rb") as fh:
        header = _read_header(fh)
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        sections = {}
        for _ in range(n):
            (nl,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, nl).decode("utf-8")
            (kind,) = struct.unpack("<B", _read_exact(fh, 1))
            (pl,) = struct.unpack("<Q", _read_exact(fh, 8))
            sections[name] = decode_section(kind, _read_exact(fh, pl))
    return header, sections
