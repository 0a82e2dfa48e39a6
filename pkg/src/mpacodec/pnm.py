"""Binary PPM (P6) images and PGM (P5) mask dumps, 8-bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .entropy import FormatError


def _tokens(data, count):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    out, pos = [], 0
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError("truncated PNM header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        out.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return out, pos + 1


def decode_pnm(data):
    """Parse P6/P5 bytes into a uint8 array ``(H, W, 3)`` or ``(H, W)``."""
    data = bytes(data)
    (magic, w, h, maxval), pos = _tokens(data, 4)
    if magic not in (b"P6", b"P5"):
        raise FormatError(f"unsupported PNM magic {magic!r}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise FormatError("malformed PNM header") from exc
    if w <= 0 or h <= 0 or maxval != 255:
        raise FormatError("only 8-bit images with positive size are supported")
    ch = 3 if magic == b"P6" else 1
    n = w * h * ch
    if len(data) - pos < n:
        raise FormatError(f"raster truncated: need {n} bytes, have {len(data) - pos}")
    arr = np.frombuffer(data, np.uint8, n, pos)
    return arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)


def read_ppm(path):
    """Image in [0, 1] as float32 ``(H, W, 3)``."""
    img = decode_pnm(Path(path).read_bytes())
    if img.ndim != 3:
        raise FormatError(f"{path}: expected a P6 colour image")
    return img.astype(np.float32) / 255.0


def to_uint8(img):
    return np.clip(np.floor(np.asarray(img, np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def encode_ppm(img):
    u8 = to_uint8(img)
    h, w = u8.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode() + u8.tobytes()


def write_ppm(path, img):
    Path(path).write_bytes(encode_ppm(img))


def write_pgm(path, mask):
    """Boolean mask to P5: 255 where the main path is taken, 0 for the side path."""
    m = np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8)
    h, w = m.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + m.tobytes())


def read_pgm(path):
    img = decode_pnm(Path(path).read_bytes())
    if img.ndim != 2:
        raise FormatError(f"{path}: expected a P5 grey image")
    return img
