"""Grayscale image files: binary PGM (P5) read/write, PNG read.

Images are returned as float64 ``(1, H, W)`` arrays in [0, 1].
"""

import os
import re

import numpy as np

LUMA = (0.299, 0.587, 0.114)


class ImageFormatError(ValueError):
    pass


_PGM_HEADER = re.compile(rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    match = _PGM_HEADER.match(data)
    if not match:
        raise ImageFormatError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in match.groups())
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: bad maxval {maxval}")
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h
    body = data[match.end():]
    pixels = np.frombuffer(body, dtype=dtype, count=count) if len(body) >= count * np.dtype(dtype).itemsize else None
    if pixels is None:
        raise ImageFormatError(f"{path}: truncated pixel data")
    return (pixels.reshape(1, h, w) / maxval).astype(np.float64)


def to_uint8(x):
    """Clamp to [0, 1] and quantise; only used at export."""
    x = np.asarray(x)
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, x):
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[0]
    h, w = x.shape
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(to_uint8(x).tobytes())
    os.replace(tmp, path)


def rgb_to_gray(rgb):
    return rgb[..., 0] * LUMA[0] + rgb[..., 1] * LUMA[1] + rgb[..., 2] * LUMA[2]


def read_png(path):
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I"):
            arr = np.asarray(im, dtype=np.float64)
            peak = 255.0 if im.mode == "L" else 65535.0
            return (arr / peak)[None]
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return rgb_to_gray(arr)[None]


def read_image(path):
    """Load a PGM or PNG file as a ``(1, H, W)`` array in [0, 1]."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(8)
    except OSError as exc:
        raise ImageFormatError(f"cannot read {path}: {exc}") from exc
    if head.startswith(b"P5"):
        return read_pgm(path)
    if head.startswith(b"\x89PNG"):
        return read_png(path)
    raise ImageFormatError(f"{path}: unsupported image format (expected PGM P5 or PNG)")


def check_unit_range(x, name="image"):
    if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
        raise ImageFormatError(f"{name} values must lie in [0, 1]")
    return x
