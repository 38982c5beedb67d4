"""PFNM model checkpoints.

Layout (little-endian)::

    b"PFNM" | u16 version | u32 n | n bytes of UTF-8 JSON ModelConfig
    u32 tensor count, then per tensor in canonical name order:
        u16 name length | name | u8 ndim | u32 dims[ndim] | float32 values
    u32 CRC-32 of every preceding byte
"""
import io
import json
import struct
import zlib

import numpy as np

from .errors import (BadMagicError, ChecksumError, DimensionError, FormatError,
                     TruncatedFileError, UnsupportedVersionError)
from .flow import ModelConfig, PanFlowModel

MAGIC = b"PFNM"
VERSION = 1


def encode_checkpoint(model):
    out = io.BytesIO()
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    out.write(MAGIC + struct.pack("<HI", VERSION, len(cfg)) + cfg)
    params = model.parameters()
    out.write(struct.pack("<I", len(params)))
    for p in params:
        name = p.name.encode("utf-8")
        out.write(struct.pack("<H", len(name)) + name)
        out.write(struct.pack(f"<B{p.ndim}I", p.ndim, *p.shape))
        out.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(f"checkpoint truncated while reading {what}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size, what))


def decode_checkpoint(buf, dtype=np.float32):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("not a PFNM checkpoint")
    if len(buf) < 10:
        raise TruncatedFileError("checkpoint header truncated")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint checksum mismatch (file corrupted or tampered)")
    r = _Reader(body)
    r.take(4, "magic")
    version, cfg_len = r.unpack("HI", "header")
    if version != VERSION:
        raise UnsupportedVersionError(f"PFNM version {version} not supported")
    try:
        config = ModelConfig.from_dict(json.loads(r.take(cfg_len, "config").decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"invalid model config: {exc}") from exc
    model = PanFlowModel(config, dtype=dtype)
    expected = model.named_parameters()
    (count,) = r.unpack("I", "tensor count")
    if count != len(expected):
        raise FormatError(f"checkpoint holds {count} tensors, config implies {len(expected)}")
    for _ in range(count):
        (nlen,) = r.unpack("H", "name length")
        name = r.take(nlen, "name").decode("utf-8", errors="replace")
        (ndim,) = r.unpack("B", "ndim")
        shape = r.unpack(f"{ndim}I", "shape")
        if name not in expected:
            raise FormatError(f"unexpected tensor {name!r}")
        if tuple(shape) != expected[name].shape:
            raise DimensionError(f"{name}: stored shape {shape} != expected {expected[name].shape}")
        n = int(np.prod(shape))
        values = np.frombuffer(r.take(4 * n, name), dtype="<f4").reshape(shape)
        expected[name].assign(values.astype(dtype))
    if r.pos != len(body):
        raise FormatError(f"{len(body) - r.pos} trailing bytes in checkpoint")
    return model


def save_checkpoint(model, path):
    blob = encode_checkpoint(model)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_checkpoint(path, dtype=np.float32):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), dtype)
