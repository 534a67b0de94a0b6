"""RUQT binary container and CSV reading/writing.

Layout (little-endian)::

    offset  size  field
    0       4     magic b"RUQT"
    4       4     version u32 (= 1)
    8       4     dtype u32 (0 = f64, 1 = i32)
    12      4     rank u32 (= 2)
    16      16    dims, 2 x u64 (rows, cols)
    32      ...   payload, row-major

An arbitrary number of sections may follow the payload.  Each section is a
4-byte ASCII tag, a u64 byte length, then that many bytes.  Plain tensor
files have no sections; quantized tensors, rotations and transforms use them
for their extra fields.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import InputError, LoadError

MAGIC = b"RUQT"
VERSION = 1
HEADER = struct.Struct("<4sIII QQ")
SECTION = struct.Struct("<4sQ")
DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i4")}
_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<i4"): 1}
_MAX_ELEMENTS = 1 << 48


def encode_tensor(X, sections=()) -> bytes:
    arr = np.asarray(X)
    if arr.ndim != 2:
        raise InputError(f"only rank-2 tensors can be stored, got shape {arr.shape}")
    if np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype("<i4")
    else:
        arr = arr.astype("<f8")
        if not np.all(np.isfinite(arr)):
            raise InputError("refusing to store non-finite entries")
    code = _DTYPE_CODES[arr.dtype]
    parts = [HEADER.pack(MAGIC, VERSION, code, 2, arr.shape[0], arr.shape[1]),
             np.ascontiguousarray(arr).tobytes()]
    for tag, payload in sections:
        tag = tag.encode("ascii") if isinstance(tag, str) else tag
        if len(tag) != 4:
            raise InputError(f"section tag must be 4 bytes, got {tag!r}")
        parts.append(SECTION.pack(tag, len(payload)))
        parts.append(bytes(payload))
    return b"".join(parts)


def decode_tensor(buf: bytes):
    """Decode a container; return ``(array, [(tag, bytes), ...])``."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise LoadError("bad magic", 0)
    if len(buf) < HEADER.size:
        raise LoadError("truncated header", len(buf))
    _, version, dtype, rank, rows, cols = HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise LoadError(f"unsupported version {version}", 4)
    if dtype not in DTYPES:
        raise LoadError(f"unsupported dtype {dtype}", 8)
    if rank != 2:
        raise LoadError(f"unsupported rank {rank}", 12)
    if rows > _MAX_ELEMENTS or cols > _MAX_ELEMENTS or rows * cols > _MAX_ELEMENTS:
        raise LoadError(f"dimension overflow ({rows} x {cols})", 16)
    dt = DTYPES[dtype]
    start = HEADER.size
    end = start + rows * cols * dt.itemsize
    if end > len(buf):
        raise LoadError(f"truncated payload: need {end} bytes, have {len(buf)}", len(buf))
    arr = np.frombuffer(buf, dtype=dt, count=rows * cols, offset=start).reshape(rows, cols)
    if dtype == 0:
        bad = np.flatnonzero(~np.isfinite(arr.ravel()))
        if bad.size:
            raise LoadError("non-finite entry", start + int(bad[0]) * dt.itemsize)
        arr = arr.astype(np.float64)
    else:
        arr = arr.astype(np.int32)
    sections = []
    pos = end
    while pos < len(buf):
        if pos + SECTION.size > len(buf):
            raise LoadError("truncated section header", pos)
        tag, length = SECTION.unpack_from(buf, pos)
        body = pos + SECTION.size
        if body + length > len(buf):
            raise LoadError(f"truncated section {tag!r}", pos)
        sections.append((tag.decode("ascii", "replace"), bytes(buf[body:body + length])))
        pos = body + length
    return arr, sections


def write_container(path, X, sections=()) -> None:
    Path(path).write_bytes(encode_tensor(X, sections))


def read_container(path):
    return decode_tensor(Path(path).read_bytes())


def save_tensor(path, X, format=None) -> None:
    """Write ``X`` as RUQT (default) or CSV (``format="csv"`` or ``.csv`` suffix)."""
    fmt = format or ("csv" if str(path).lower().endswith(".csv") else "ruqt")
    if fmt == "csv":
        arr = np.asarray(X, dtype=np.float64)
        if arr.ndim != 2:
            raise InputError("CSV output needs a 2-D tensor")
        np.savetxt(path, arr, delimiter=",", fmt="%.17g")
    elif fmt == "ruqt":
        write_container(path, X)
    else:
        raise InputError(f"unknown format {fmt!r}")


def load_tensor(path) -> np.ndarray:
    """Read a plain tensor from a RUQT or CSV file."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"no such file: {path}")
    if path.suffix.lower() == ".csv":
        return _load_csv(path)
    arr, _ = read_container(path)
    return arr


def _load_csv(path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append([float(v) for v in line.split(",")])
        except ValueError:
            raise InputError(f"{path}: line {lineno} is not numeric") from None
    if not rows:
        raise InputError(f"{path}: empty CSV")
    if len({len(r) for r in rows}) != 1:
        raise InputError(f"{path}: ragged rows")
    arr = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{path}: non-finite entry")
    return arr


def pack_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True).encode("utf-8")


def unpack_json(payload: bytes):
    return json.loads(payload.decode("utf-8"))


def section_map(sections, required=()):
    found = {}
    for tag, payload in sections:
        found.setdefault(tag, []).append(payload)
    missing = [t for t in required if t not in found]
    if missing:
        raise LoadError(f"missing section(s) {', '.join(missing)}")
    return found
