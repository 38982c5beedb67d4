"""PFNR raster files: little-endian header then channel-last float32 pixels.

Layout::

    b"PFNR" | u16 version | u32 height | u32 width | u32 channels | float32[h*w*c]
"""
import struct

import numpy as np

from .errors import BadMagicError, DimensionError, FormatError, TruncatedFileError, UnsupportedVersionError

MAGIC = b"PFNR"
VERSION = 1
_HEADER = struct.Struct("<4sHIII")
MAX_ELEMENTS = 1 << 30


def encode_raster(img):
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise DimensionError(f"raster must be H x W x C, got shape {img.shape}")
    if 0 in img.shape:
        raise DimensionError(f"raster has a zero-size dimension: {img.shape}")
    if not np.isfinite(img).all():
        raise ValueError("raster contains NaN or Inf")
    data = np.clip(img, 0.0, 1.0).astype("<f4")
    h, w, c = data.shape
    return _HEADER.pack(MAGIC, VERSION, h, w, c) + data.tobytes(order="C")


def decode_raster(buf):
    if len(buf) < _HEADER.size:
        if not MAGIC.startswith(bytes(buf[:4])):
            raise BadMagicError("not a PFNR raster")
        raise TruncatedFileError(f"header needs {_HEADER.size} bytes, file has {len(buf)}")
    magic, version, h, w, c = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"PFNR version {version} not supported")
    if h == 0 or w == 0 or c == 0:
        raise DimensionError(f"zero-size dimension in header: {h}x{w}x{c}")
    n = h * w * c
    if n > MAX_ELEMENTS:
        raise DimensionError(f"header dimensions {h}x{w}x{c} exceed {MAX_ELEMENTS} elements")
    payload = len(buf) - _HEADER.size
    if payload < 4 * n:
        raise TruncatedFileError(f"payload has {payload} bytes, header promises {4 * n}")
    if payload > 4 * n:
        raise FormatError(f"{payload - 4 * n} trailing bytes after pixel data")
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=_HEADER.size)
    return arr.astype(np.float32).reshape(h, w, c)


def write_raster(img, path):
    """Write an H x W x C image; values are clamped to [0, 1]."""
    blob = encode_raster(img)
    with open(path, "wb") as fh:
        fh.write(blob)


def read_raster(path):
    with open(path, "rb") as fh:
        return decode_raster(fh.read())
