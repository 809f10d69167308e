"""Binary parameter checkpoints.

Layout, little-endian::

    8s   magic "ECGMOECK"
    u32  format version
    32s  SHA-256 digest of the model configuration
    u32  number of blocks
    per block: u32 name length, name (utf-8), u32 ndim, ndim x u32 dims, f64 data
"""

from __future__ import annotations

import math
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigDigestMismatch, FormatError, VersionMismatch

CHECKPOINT_MAGIC = b"ECGMOECK"
CHECKPOINT_VERSION = 1


def encode_checkpoint(model) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), model.config.digest()]
    params = list(model.named_parameters())
    parts.append(struct.pack("<I", len(params)))
    for name, p in params:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{p.value.ndim}I", p.value.ndim, *p.value.shape))
        parts.append(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(
                f"truncated checkpoint while reading {what}: need {n} bytes, {len(self.data) - self.pos} left",
                self.pos,
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def decode_checkpoint(data: bytes, expected_digest: bytes | None = None) -> dict:
    """Parse checkpoint bytes into ``{name: array}``; every failure is a FormatError subclass."""
    r = _Reader(data)
    magic = r.take(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    version_at = r.pos
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}", version_at)
    digest = r.take(32, "config digest")
    if expected_digest is not None and digest != expected_digest:
        raise ConfigDigestMismatch(
            f"checkpoint was written for a different model configuration "
            f"({digest.hex()[:12]}... vs {expected_digest.hex()[:12]}...)"
        )
    blocks = {}
    for _ in range(r.u32("block count")):
        at = r.pos
        n = r.u32("name length")
        try:
            name = r.take(n, "block name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("block name is not valid utf-8", at + 4) from None
        ndim = r.u32(f"rank of {name}")
        if ndim > 8:
            raise FormatError(f"block {name} claims {ndim} dimensions", r.pos - 4)
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"shape of {name}"))
        count = math.prod(shape)
        raw = r.take(8 * count, f"data of {name}")
        if name in blocks:
            raise FormatError(f"duplicate block {name}", at)
        blocks[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after the last block", r.pos)
    return blocks


def save_checkpoint(model, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(model))
    os.replace(tmp, path)


def load_checkpoint(model, path):
    """Load parameters from ``path`` into ``model`` (configs must match); returns the model."""
    with open(path, "rb") as fh:
        data = fh.read()
    blocks = decode_checkpoint(data, model.config.digest())
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(blocks))
    extra = sorted(set(blocks) - set(params))
    if missing or extra:
        raise FormatError(f"parameter set differs: missing {missing[:3]}, unexpected {extra[:3]}", 0)
    for name, p in params.items():
        if blocks[name].shape != p.value.shape:
            raise FormatError(f"block {name} has shape {blocks[name].shape}, expected {p.value.shape}", 0)
    for name, p in params.items():
        p.value[...] = blocks[name]
    return model
