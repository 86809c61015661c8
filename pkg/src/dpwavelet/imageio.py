"""Binary 8-bit PGM (P5) and PPM (P6) reading and writing."""

from __future__ import annotations

import os
import re
import tempfile
from pathlib import Path

import numpy as np

from .errors import DataError

_HEADER = re.compile(rb"^(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to 0..255 (clipped, rounded half to even)."""
    arr = np.asarray(image, dtype=np.float64)
    return np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_pnm(image: np.ndarray) -> bytes:
    """Serialize an ``(H, W)``/``(H, W, 1)`` (P5) or ``(H, W, 3)`` (P6) image."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = to_uint8(arr)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise DataError(f"cannot write image of shape {arr.shape} as PGM/PPM")
    h, w = arr.shape[:2]
    return b"%s\n%d %d\n255\n" % (magic, w, h) + np.ascontiguousarray(arr).tobytes()


def decode_pnm(data: bytes) -> np.ndarray:
    """Parse P5/P6 bytes into a uint8 ``(H, W, C)`` array."""
    m = _HEADER.match(data)
    if not m:
        raise DataError("not a binary PGM/PPM image")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise DataError(f"only 8-bit images are supported (maxval={maxval})")
    c = 1 if magic == b"P5" else 3
    raw = data[m.end() :]
    if len(raw) != h * w * c:
        raise DataError(f"expected {h * w * c} pixel bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, c).copy()


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_image(path, image: np.ndarray) -> None:
    atomic_write_bytes(path, encode_pnm(image))


def read_image(path, opener=open) -> np.ndarray:
    """Read a PGM/PPM file as float64 ``(H, W, C)`` in [0, 1]."""
    with opener(path, "rb") as fh:
        data = fh.read()
    return decode_pnm(data).astype(np.float64) / 255.0
