"""Versioned, checksummed checkpoint container.

Layout (little-endian)::

    b"DPWV" | u16 version | u16 section count
    per section: u16 name length | name utf-8 | u64 offset | u64 length | 32-byte sha256
    section payloads

Each payload is a JSON header (u32 length prefix) followed by raw array
bytes described in the header, so writes are byte-for-byte deterministic.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from typing import Dict, Mapping, Tuple

import numpy as np

from .errors import DataError
from .imageio import atomic_write_bytes

MAGIC = b"DPWV"
VERSION = 1
SECTIONS = ("codebooks", "params", "config", "manifest")


def pack_section(meta: dict, arrays: Mapping[str, np.ndarray] = None) -> bytes:
    arrays = arrays or {}
    table = []
    blobs = []
    off = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dt = arr.dtype.newbyteorder("<")
        raw = arr.astype(dt, copy=False).tobytes()
        table.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": off, "size": len(raw)})
        blobs.append(raw)
        off += len(raw)
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True).encode()
    return struct.pack("<I", len(header)) + header + b"".join(blobs)


def unpack_section(data: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    (hlen,) = struct.unpack_from("<I", data, 0)
    header = json.loads(data[4 : 4 + hlen])
    base = 4 + hlen
    arrays = {}
    for entry in header["arrays"]:
        lo = base + entry["offset"]
        buf = data[lo : lo + entry["size"]]
        arrays[entry["name"]] = np.frombuffer(buf, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return header["meta"], arrays


def encode_container(sections: Mapping[str, bytes]) -> bytes:
    names = [n for n in SECTIONS if n in sections] + sorted(n for n in sections if n not in SECTIONS)
    head = io.BytesIO()
    head.write(MAGIC)
    head.write(struct.pack("<HH", VERSION, len(names)))
    table_size = sum(2 + len(n.encode()) + 8 + 8 + 32 for n in names)
    off = len(MAGIC) + 4 + table_size
    payload = []
    for n in names:
        body = sections[n]
        nb = n.encode()
        head.write(struct.pack("<H", len(nb)) + nb + struct.pack("<QQ", off, len(body)))
        head.write(hashlib.sha256(body).digest())
        payload.append(body)
        off += len(body)
    return head.getvalue() + b"".join(payload)


def decode_container(data: bytes) -> Dict[str, bytes]:
    if data[:4] != MAGIC:
        raise DataError("not a DPWV checkpoint (bad magic)")
    if len(data) < 8:
        raise DataError("truncated checkpoint header")
    version, count = struct.unpack_from("<HH", data, 4)
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    pos = 8
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode()
            pos += nlen
            off, length = struct.unpack_from("<QQ", data, pos)
            pos += 16
            digest = data[pos : pos + 32]
            pos += 32
            body = data[off : off + length]
            if len(body) != length or hashlib.sha256(body).digest() != digest:
                raise DataError(f"checksum mismatch in section {name!r}")
            out[name] = body
    except struct.error as exc:
        raise DataError(f"truncated checkpoint: {exc}") from None
    return out


def save(path, sections: Mapping[str, Tuple[dict, Mapping[str, np.ndarray]]]) -> None:
    packed = {name: pack_section(meta, arrays) for name, (meta, arrays) in sections.items()}
    atomic_write_bytes(path, encode_container(packed))


def load(path) -> Dict[str, Tuple[dict, Dict[str, np.ndarray]]]:
    with open(path, "rb") as fh:
        data = fh.read()
    return {name: unpack_section(body) for name, body in decode_container(data).items()}
