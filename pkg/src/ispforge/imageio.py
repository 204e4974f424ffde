"""Image files: 8-bit PNG/PPM for RGB in [0, 1], 16-bit PGM for raw mosaics."""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .errors import FormatError
from .serialize import atomic_write


def to_uint8(rgb):
    """(3, h, w) or (1, 3, h, w) float in [0, 1] -> (h, w, 3) uint8 via round(255 v)."""
    a = np.asarray(rgb, dtype=np.float64)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch of {a.shape[0]}")
        a = a[0]
    if a.ndim != 3 or a.shape[0] != 3:
        raise ValueError(f"expected (3, h, w) RGB, got {a.shape}")
    return np.rint(np.clip(a, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(img):
    """(h, w, 3) uint8 -> (1, 3, h, w) float32 in [0, 1]."""
    return (np.asarray(img, dtype=np.float32) / 255.0).transpose(2, 0, 1)[None].copy()


def write_png(path, rgb):
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(to_uint8(rgb), mode="RGB").save(buf, format="PNG")
    atomic_write(path, buf.getvalue())


def read_png(path):
    from PIL import Image

    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def write_ppm(path, rgb):
    img = to_uint8(rgb)
    h, w = img.shape[:2]
    atomic_write(path, f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def _read_netpbm(path, magic):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} netpbm, got {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    return data[pos + 1:], w, h, maxval


def read_ppm(path):
    body, w, h, maxval = _read_netpbm(path, b"P6")
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    return from_uint8(np.frombuffer(body[:w * h * 3], np.uint8).reshape(h, w, 3))


def read_rgb(path):
    return read_ppm(path) if Path(path).suffix.lower() == ".ppm" else read_png(path)


def write_rgb(path, rgb):
    (write_ppm if Path(path).suffix.lower() == ".ppm" else write_png)(path, rgb)


def write_pgm16(path, data, maxval=65535):
    a = np.asarray(data)
    if a.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got {a.shape}")
    h, w = a.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode()
    atomic_write(path, header + a.astype(">u2").tobytes())


def read_pgm16(path):
    body, w, h, maxval = _read_netpbm(path, b"P5")
    if maxval < 256:
        return np.frombuffer(body[:w * h], np.uint8).reshape(h, w).astype(np.uint16)
    if len(body) < w * h * 2:
        raise FormatError(f"{path}: truncated PGM body")
    return np.frombuffer(body[:w * h * 2], ">u2").reshape(h, w).astype(np.uint16)
