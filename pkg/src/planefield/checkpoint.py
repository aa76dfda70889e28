"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes  b"PLNFCKPT"
    version    u32
    meta_len   u32, then meta_len bytes of UTF-8 JSON (free-form run metadata)
    n_sections u32
    per section:
        name_len u16, name (UTF-8)
        ndim     u8, then ndim x u32 dims
        payload  prod(dims) x float32
    sha256     32 bytes over everything above

Files are written to a temporary sibling and renamed into place, so a crash
never leaves a half-written checkpoint under the final name.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
import torch

from .data import atomic_write_bytes
from .errors import CorruptionError, FormatError, InputDomainError

MAGIC = b"PLNFCKPT"
VERSION = 1
_HASH_LEN = 32


def encode_checkpoint(sections, meta=None):
    """Serialize ``{name: tensor}`` (stored as float32) and a JSON-able ``meta`` dict."""
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    blob = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(blob)) + blob
    out += struct.pack("<I", len(sections))
    for name, tensor in sections.items():
        # asarray, not ascontiguousarray, so 0-d tensors keep ndim 0
        arr = np.asarray(torch.as_tensor(tensor).detach().cpu().numpy(), dtype="<f4")
        if arr.ndim > 255:
            raise InputDomainError(f"section {name!r} has too many dimensions")
        key = name.encode("utf-8")
        out += struct.pack("<H", len(key)) + key
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes(order="C")
    out += hashlib.sha256(out).digest()
    return bytes(out)


def save_checkpoint(path, sections, meta=None):
    atomic_write_bytes(path, encode_checkpoint(sections, meta))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CorruptionError("checkpoint truncated")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf):
    """Inverse of :func:`encode_checkpoint`; returns (sections, meta)."""
    if len(buf) < len(MAGIC) + 4 + _HASH_LEN:
        raise CorruptionError("checkpoint truncated")
    if buf[:len(MAGIC)] != MAGIC:
        raise FormatError("not a plane-field checkpoint (bad magic)")
    body, digest = buf[:-_HASH_LEN], buf[-_HASH_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptionError("checkpoint content hash mismatch")
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (meta_len,) = r.unpack("<I")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    sections = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        sections[name] = torch.from_numpy(arr.astype(np.float32))
    if r.pos != len(body):
        raise CorruptionError("trailing bytes after last section")
    return sections, meta


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read checkpoint ({exc})") from exc
    return decode_checkpoint(buf)


def file_digest(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
