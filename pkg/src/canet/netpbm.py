"""Binary PPM (P6) / PGM (P5) readers and writers, 8-bit only."""
from __future__ import annotations

import os
from typing import Tuple

import numpy as np

__all__ = ["NetpbmError", "write_ppm", "write_pgm", "read_ppm", "read_pgm", "read_netpbm"]


class NetpbmError(ValueError):
    pass


def _write(path, magic: bytes, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(b"%s\n%d %d\n255\n" % (magic, w, h))
        f.write(arr.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (h, w, 3) uint8 image."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise NetpbmError(f"PPM expects (h, w, 3), got {rgb.shape}")
    _write(path, b"P6", rgb)


def write_pgm(path, gray: np.ndarray) -> None:
    """Write an (h, w) uint8 image."""
    if gray.ndim != 2:
        raise NetpbmError(f"PGM expects (h, w), got {gray.shape}")
    _write(path, b"P5", gray)


def _tokens(buf: bytes, count: int, pos: int) -> Tuple[list, int]:
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise NetpbmError("truncated header")
        out.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return out, pos + 1


def read_netpbm(path) -> np.ndarray:
    """Read a P5 or P6 file; returns (h, w) or (h, w, 3) uint8."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 2 or buf[:2] not in (b"P5", b"P6"):
        raise NetpbmError(f"{os.fspath(path)}: not a binary PGM/PPM file")
    channels = 1 if buf[:2] == b"P5" else 3
    try:
        (w, h, maxval), pos = _tokens(buf, 3, 2)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise NetpbmError(f"{os.fspath(path)}: malformed header ({exc})") from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise NetpbmError(f"{os.fspath(path)}: unsupported header w={w} h={h} maxval={maxval}")
    size = w * h * channels
    raster = buf[pos : pos + size]
    if len(raster) != size:
        raise NetpbmError(f"{os.fspath(path)}: expected {size} bytes of pixels, found {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, 3)


def read_ppm(path) -> np.ndarray:
    arr = read_netpbm(path)
    if arr.ndim != 3:
        raise NetpbmError(f"{os.fspath(path)}: expected a P6 (colour) image")
    return arr


def read_pgm(path) -> np.ndarray:
    arr = read_netpbm(path)
    if arr.ndim != 2:
        raise NetpbmError(f"{os.fspath(path)}: expected a P5 (grey) image")
    return arr
