"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"BMQA"  magic
    u32      format version
    u32      config length, then UTF-8 config text (JSON)
    u32      tensor count, then per tensor:
               u16 name length, UTF-8 name
               u8  dtype code (1 = float32, 2 = float64)
               u8  rank, rank x u32 dims
               payload, little-endian
    u32      CRC-32 of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .data import atomic_write_bytes
from .errors import FormatError

MAGIC = b"BMQA"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {v: k for k, v in _DTYPES.items()}


@dataclass
class ModelCheckpoint:
    config: dict
    tensors: dict = field(default_factory=dict)
    version: int = VERSION

    def config_text(self):
        return json.dumps(self.config, sort_keys=True, separators=(",", ":"))


def to_bytes(ckpt, dtype="<f4"):
    dtype = np.dtype(dtype)
    parts = [MAGIC, struct.pack("<I", ckpt.version)]
    cfg = ckpt.config_text().encode("utf-8")
    parts += [struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(ckpt.tensors))]
    for name, value in ckpt.tensors.items():
        arr = np.asarray(value).astype(dtype, copy=False)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(buf):
    if len(buf) < 16:
        raise FormatError("checkpoint: truncated file")
    if buf[:4] != MAGIC:
        raise FormatError(f"checkpoint: bad magic {buf[:4]!r}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint: checksum mismatch (corrupted or truncated)")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise FormatError(f"checkpoint: unsupported format version {version}")
    pos = 8
    try:
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        config = json.loads(body[pos:pos + n].decode("utf-8"))
        pos += n
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BB", body, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            dtype = _DTYPES[code]
            size = int(np.prod(dims)) * dtype.itemsize
            if pos + size > len(body):
                raise FormatError(f"checkpoint: payload of {name!r} truncated")
            tensors[name] = np.frombuffer(body, dtype=dtype, count=int(np.prod(dims)), offset=pos).reshape(dims).copy()
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint: malformed body ({exc})") from None
    if pos != len(body):
        raise FormatError("checkpoint: trailing bytes after tensor table")
    return ModelCheckpoint(config=config, tensors=tensors, version=version)


def save_checkpoint(ckpt, path):
    atomic_write_bytes(path, to_bytes(ckpt))


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            return from_bytes(fh.read())
    except OSError as exc:
        raise FormatError(f"checkpoint: cannot read {path}: {exc.strerror}") from None
