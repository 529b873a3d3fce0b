"""File formats: CSV grids, 8-bit PGM, JSON, and raw latent dumps.

Every writer goes through ``atomic_write`` (write to a temp file in the target
directory, then rename), so readers never observe a partial file.

Latent dumps are an 8-byte header holding ``rows`` and ``cols`` as
little-endian uint32, followed by ``rows * cols`` little-endian float64 values
in row-major order.
"""
from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

_HEADER = struct.Struct("<II")


def atomic_write(path, data: bytes | str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj):
    atomic_write(path, dumps_json(obj))


def write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    atomic_write(path, buf.getvalue())


def write_grid_csv(path, grid):
    """A 2-D array as a headerless CSV, full ``repr`` precision."""
    g = np.asarray(grid, dtype=np.float64)
    lines = [",".join(repr(float(v)) for v in row) for row in g]
    atomic_write(path, "\n".join(lines) + "\n")


def read_grid_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh) if row])


def to_gray8(grid, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    lo = float(g.min()) if lo is None else lo
    hi = float(g.max()) if hi is None else hi
    if hi - lo < 1e-12:
        return np.zeros(g.shape, dtype=np.uint8)
    return np.clip(np.rint((g - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, grid, lo: float = 0.0, hi: float = 1.0):
    """Binary (P5) 8-bit PGM; values are mapped linearly from ``[lo, hi]``."""
    img = to_gray8(grid, lo, hi)
    h, w = img.shape
    atomic_write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def pack_matrix(arr) -> bytes:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"latent dumps are 2-d, got shape {a.shape}")
    return _HEADER.pack(*a.shape) + a.astype("<f8").tobytes(order="C")


def unpack_matrix(buf: bytes) -> np.ndarray:
    rows, cols = _HEADER.unpack_from(buf, 0)
    body = buf[_HEADER.size:]
    if len(body) != rows * cols * 8:
        raise ValueError(f"dump body has {len(body)} bytes, header promises {rows * cols * 8}")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)


def write_matrix(path, arr):
    atomic_write(path, pack_matrix(arr))


def read_matrix(path) -> np.ndarray:
    return unpack_matrix(Path(path).read_bytes())
