"""On-disk measurement container (``.ccsm``).

Layout, all little-endian::

    magic        4s   b"CCSM"
    version      u16
    precision    u8   32 or 64, precision the measurements were computed in
    H, W         u32  sensed (padded) geometry
    L, m, s      u32
    seed         u64  filter-bank seed
    noise        f32  noise std on the 0-255 scale
    pads         4 x u16  top, bottom, left, right reflect padding
    payload      m * M0h * M0w f32, filter-major then row-major
"""

import os
import struct

import numpy as np

from .sensing import MeasurementSet, SenseMeta

MAGIC = b"CCSM"
VERSION = 1
_HEADER = struct.Struct("<4sHB5IQf4H")


class FormatError(ValueError):
    pass


def encode(y):
    meta = y.meta
    expected = (meta.m, *meta.grid)
    if y.maps.shape != expected:
        raise FormatError(f"maps shape {y.maps.shape} does not match meta grid {expected}")
    header = _HEADER.pack(
        MAGIC, VERSION, meta.precision, meta.H, meta.W, meta.L, meta.m, meta.s,
        meta.seed, meta.noise_sigma255, *meta.pads,
    )
    return header + np.ascontiguousarray(y.maps, dtype="<f4").tobytes()


def decode(data):
    if len(data) < _HEADER.size:
        raise FormatError("file too short for a CCSM header")
    magic, version, precision, H, W, L, m, s, seed, noise, *pads = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError("bad magic; not a CCSM file")
    if version != VERSION:
        raise FormatError(f"unsupported CCSM version {version}")
    if min(L, m, s) < 1 or H < L or W < L or (H - L) % s or (W - L) % s:
        raise FormatError(f"inconsistent geometry H={H} W={W} L={L} s={s}")
    meta = SenseMeta(H=H, W=W, L=L, m=m, s=s, seed=seed, noise_sigma255=noise,
                     precision=precision, pads=tuple(pads))
    count = meta.num_measurements
    if len(data) != _HEADER.size + 4 * count:
        raise FormatError(f"payload holds {(len(data) - _HEADER.size) / 4:g} values, expected {count}")
    maps = np.frombuffer(data, dtype="<f4", count=count, offset=_HEADER.size)
    return MeasurementSet(maps=maps.reshape(m, *meta.grid).astype(np.float32), meta=meta)


def write_ccsm(path, y):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(encode(y))
    os.replace(tmp, path)


def read_ccsm(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
