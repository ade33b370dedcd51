"""On-disk formats: binary PGM (P5, maxval 255) and the FSTA tensor archive.

Archive layout: magic "FSTA", one version byte, one dtype byte (0 = u8,
1 = f64), one ndim byte, little-endian u32 extents, then the row-major
payload. Round trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

ARCHIVE_MAGIC = b"FSTA"
ARCHIVE_VERSION = 1
_DTYPES = {0: np.dtype("u1"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("u1"): 0, np.dtype("<f8"): 1}


class ArchiveError(ValueError):
    pass


def archive_write(arr: np.ndarray, path) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.uint8:
        code = 0
    else:
        arr = arr.astype("<f8")
        code = 1
    if arr.ndim > 255:
        raise ArchiveError("archive_write: too many dimensions")
    header = ARCHIVE_MAGIC + bytes([ARCHIVE_VERSION, code, arr.ndim])
    header += b"".join(struct.pack("<I", s) for s in arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def archive_read(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 7:
        raise ArchiveError(f"{path}: truncated header")
    if raw[:4] != ARCHIVE_MAGIC:
        raise ArchiveError(f"{path}: bad magic {raw[:4]!r}")
    if raw[4] != ARCHIVE_VERSION:
        raise ArchiveError(f"{path}: unsupported version {raw[4]}")
    if raw[5] not in _DTYPES:
        raise ArchiveError(f"{path}: unknown dtype code {raw[5]}")
    dtype = _DTYPES[raw[5]]
    ndim = raw[6]
    off = 7 + 4 * ndim
    if len(raw) < off:
        raise ArchiveError(f"{path}: truncated extents")
    shape = struct.unpack("<" + "I" * ndim, raw[7:off])
    n = int(np.prod(shape)) if ndim else 1
    payload = raw[off:]
    if len(payload) != n * dtype.itemsize:
        raise ArchiveError(
            f"{path}: payload length {len(payload)} != expected {n * dtype.itemsize}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


class PgmError(ValueError):
    pass


def pgm_write(img: np.ndarray, path) -> None:
    """Write a 2-d u8 array as binary PGM (P5, maxval 255)."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise PgmError(f"pgm_write: expected 2-d image, got shape {img.shape}")
    data = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def pgm_read(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        if pos >= len(raw):
            raise PgmError(f"{path}: truncated header")
        if raw[pos : pos + 1] == b"#":  # comment to end of line
            nl = raw.find(b"\n", pos)
            pos = len(raw) if nl < 0 else nl + 1
            continue
        if raw[pos] in b" \t\r\n":
            pos += 1
            continue
        end = pos
        while end < len(raw) and raw[end] not in b" \t\r\n":
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise PgmError(f"{path}: not a binary PGM (got {fields[0]!r})")
    w, h, maxval = (int(f) for f in fields[1:4])
    if maxval != 255:
        raise PgmError(f"{path}: unsupported maxval {maxval}")
    pos += 1  # single whitespace after maxval
    data = raw[pos : pos + w * h]
    if len(data) != w * h:
        raise PgmError(f"{path}: payload length {len(data)} != {w * h}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()
