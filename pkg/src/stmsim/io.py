"""Persistence: 16-bit PGM, CSV grids and JSON sidecars."""
from __future__ import annotations

import hashlib
import json

import numpy as np


def to_uint16(img, lo=None, hi=None):
    """Scale a float image to the full 16-bit range; NaN maps to 0."""
    a = np.asarray(img, dtype=float)
    fin = np.isfinite(a)
    lo = np.nanmin(a) if lo is None else lo
    hi = np.nanmax(a) if hi is None else hi
    if not fin.any():
        return np.zeros(a.shape, dtype=np.uint16), 0.0, 0.0
    span = hi - lo if hi > lo else 1.0
    q = np.zeros(a.shape)
    q[fin] = np.clip((a[fin] - lo) / span, 0.0, 1.0) * 65535.0
    return np.rint(q).astype(np.uint16), float(lo), float(hi)


def write_pgm(path, img, lo=None, hi=None):
    """Binary P5 PGM, maxval 65535, big-endian samples, first row at the top.

    Returns the (lo, hi) scaling so the image can be mapped back to units.
    """
    q, lo, hi = to_uint16(img, lo, hi)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(q.astype(">u2").tobytes())
    return lo, hi


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, mx = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dt = ">u2" if mx > 255 else "u1"
    return np.frombuffer(data[pos:], dtype=dt, count=w * h).reshape(h, w)


def write_grid_csv(path, img, x=None, y=None):
    """Long-format CSV: x, y, value (one row per pixel)."""
    import csv

    img = np.asarray(img, dtype=float)
    ny, nx = img.shape
    x = np.arange(nx) if x is None else x
    y = np.arange(ny) if y is None else y
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_nm", "y_nm", "value"])
        for j in range(ny):
            for i in range(nx):
                w.writerow([repr(float(x[i])), repr(float(y[j])), repr(float(img[j, i]))])


def config_hash(obj) -> str:
    """SHA-256 of a canonical JSON rendering."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_default).encode()
    return hashlib.sha256(blob).hexdigest()


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "__dataclass_fields__"):
        from dataclasses import asdict

        return asdict(o)
    return str(o)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2, default=_default)
        fh.write("\n")
