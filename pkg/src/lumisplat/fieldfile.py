"""Binary Gaussian-field container.

Layout (all little-endian):

    magic   4 bytes  b"SPLB"
    version u16      currently 1
    count   u32      primitive count N
    degree  u8       SH degree L
    prov    u8       provenance tag index
    payload          float32 arrays in order mu, rot, scale, density,
                     opacity, sh (N*3, N*4, N*3, N, N, N*3*(L+1)^2 values)
    crc     u32      CRC32 of the payload bytes

Loading is all-or-nothing: any header or checksum problem raises before a
field object is constructed.
"""
from __future__ import annotations

import struct
import zlib

import numpy as np
import torch

from .gaussians import GaussianField, PROVENANCE_TAGS

MAGIC = b"SPLB"
VERSION = 1
_HEADER = struct.Struct("<4sHIBB")


class FieldFileError(ValueError):
    """Base class for field-file problems."""


class BadMagicError(FieldFileError):
    pass


class UnsupportedVersionError(FieldFileError):
    pass


class ChecksumError(FieldFileError):
    pass


class FormatError(FieldFileError):
    """Payload length or tag inconsistent with the header."""


def save_field(field: GaussianField) -> bytes:
    field.validate()
    n = len(field)
    degree = field.sh_degree
    prov = PROVENANCE_TAGS.index(field.provenance)
    parts = []
    for name in ("mu", "rot", "scale", "density", "opacity", "sh"):
        t = getattr(field, name).detach().to(torch.float32).contiguous()
        arr = t.numpy()
        if arr.dtype.byteorder == ">":  # big-endian host
            arr = arr.astype("<f4")
        parts.append(arr.tobytes())
    payload = b"".join(parts)
    header = _HEADER.pack(MAGIC, VERSION, n, degree, prov)
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def load_field(data: bytes) -> GaussianField:
    if len(data) < _HEADER.size + 4:
        raise FormatError("file shorter than header plus checksum")
    magic, version, n, degree, prov = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if prov >= len(PROVENANCE_TAGS):
        raise FormatError(f"unknown provenance index {prov}")
    n_coeffs = (degree + 1) ** 2
    counts = (n * 3, n * 4, n * 3, n, n, n * 3 * n_coeffs)
    stride = sum(counts) * 4
    payload = data[_HEADER.size:_HEADER.size + stride]
    if len(payload) != stride or len(data) != _HEADER.size + stride + 4:
        raise FormatError("payload length does not match header count")
    (crc,) = struct.unpack_from("<I", data, _HEADER.size + stride)
    if zlib.crc32(payload) != crc:
        raise ChecksumError("payload checksum mismatch")
    flat = torch.from_numpy(np.frombuffer(payload, dtype="<f4").copy())
    fields, off = [], 0
    for c in counts:
        fields.append(flat[off:off + c])
        off += c
    mu, rot, scale, density, opacity, sh = fields
    return GaussianField(mu=mu.reshape(n, 3), rot=rot.reshape(n, 4),
                         scale=scale.reshape(n, 3), density=density,
                         opacity=opacity, sh=sh.reshape(n, 3, n_coeffs),
                         provenance=PROVENANCE_TAGS[prov])


def save_field_file(field: GaussianField, path: str) -> None:
    with open(path, "wb") as f:
        f.write(save_field(field))


def load_field_file(path: str) -> GaussianField:
    with open(path, "rb") as f:
        return load_field(f.read())
