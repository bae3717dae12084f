"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"ILUCKPT1"                         8-byte magic
    u32 version
    u32 n, n bytes                      UTF-8 JSON model descriptor
    repeated per tensor, canonical order:
        u32 n, n bytes                  UTF-8 tensor name
        u32 rank, rank x u32 dims
        prod(dims) x float32            row-major values
    u32 crc32 of every preceding byte
"""
from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from ..errors import FormatError
from .config import ModelConfig, layout
from .params import ParameterVector

MAGIC = b"ILUCKPT1"
VERSION = 1


def encode(params: ParameterVector) -> bytes:
    cfg = params.config
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    desc = cfg.describe().encode("utf-8")
    out += struct.pack("<I", len(desc)) + desc
    for name, tensor in params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", tensor.ndim)
        out += struct.pack(f"<{tensor.ndim}I", *tensor.shape)
        out += np.ascontiguousarray(tensor, dtype="<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    return bytes(out)


def save_checkpoint(params: ParameterVector, path) -> None:
    """Write ``params`` atomically (temp file + rename)."""
    data = encode(params)
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data) - 4:
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def decode(data: bytes):
    if len(data) < len(MAGIC) + 8:
        raise FormatError("truncated checkpoint header", len(data))
    if data[:8] != MAGIC:
        raise FormatError(f"bad magic {data[:8]!r}, expected {MAGIC!r}", 0)
    rd = _Reader(data)
    rd.pos = 8
    version = rd.u32("version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    n = rd.u32("descriptor length")
    desc_at = rd.pos
    try:
        config = ModelConfig.from_descriptor(rd.take(n, "descriptor").decode("utf-8"))
    except FormatError:
        raise
    except Exception as exc:
        raise FormatError(f"invalid model descriptor: {exc}", desc_at) from exc
    tensors = {}
    for name, shape in layout(config):
        at = rd.pos
        got = rd.take(rd.u32("name length"), "tensor name").decode("utf-8")
        if got != name:
            raise FormatError(f"expected tensor {name!r}, found {got!r}", at)
        rank = rd.u32("rank")
        dims = tuple(struct.unpack(f"<{rank}I", rd.take(4 * rank, "dims")))
        if dims != tuple(shape):
            raise FormatError(f"tensor {name!r} has dims {dims}, expected {tuple(shape)}", at)
        count = int(np.prod(dims)) if dims else 1
        raw = rd.take(4 * count, f"values of {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
    if rd.pos != len(data) - 4:
        raise FormatError("trailing bytes before checksum", rd.pos)
    stored = struct.unpack("<I", data[-4:])[0]
    actual = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise FormatError(f"CRC mismatch: stored {stored:#010x}, computed {actual:#010x}",
                          len(data) - 4)
    return ParameterVector.from_tensors(config, tensors), config


def load_checkpoint(path):
    """Return ``(params, config)``; raises :class:`FormatError` on any defect."""
    with open(path, "rb") as fh:
        data = fh.read()
    return decode(data)
