"""One binary container ("AFL1") shared by base models, adapters, and routers.

Layout, all little-endian:

    magic "AFL1" | u32 version | u8 kind | 32-byte fingerprint |
    u32 n_arrays | per array: u16 name-len, name utf8, u8 ndim,
    u32 dims..., float64 data

The fingerprint field carries the base-model hash the payload belongs to
(for a base model file, its own hash), which is how loads detect
adapter/base mismatches before any shape check runs.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"AFL1"
VERSION = 1

KIND_BASE = 0
KIND_ADAPTER = 1
KIND_ROUTER = 2


class StoreError(Exception):
    """Base class for persistence failures."""


class TruncatedFileError(StoreError):
    pass


class UnsupportedVersionError(StoreError):
    pass


class FingerprintMismatchError(StoreError):
    pass


class MissingExpertFileError(StoreError):
    pass


def write_arrays(path, kind: int, fingerprint: str, arrays: dict) -> None:
    """Write named float64 arrays to ``path`` under the given fingerprint."""
    fp_bytes = bytes.fromhex(fingerprint)
    if len(fp_bytes) != 32:
        raise ValueError("fingerprint must be a 64-hex-char sha256 digest")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IB", VERSION, kind))
        fh.write(fp_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f8")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.tobytes(order="C"))


def read_arrays(path, expect_kind: int | None = None):
    """Read an AFL1 file; returns (kind, fingerprint_hex, arrays dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()

    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedFileError(f"truncated file: {path}")
        out = blob[pos : pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise StoreError(f"not an AFL1 file: {path}")
    version, kind = struct.unpack("<IB", take(5))
    if version != VERSION:
        raise UnsupportedVersionError(f"unknown version {version} in {path}")
    fingerprint = take(32).hex()
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        n_items = 1
        for dim in shape:
            n_items *= dim
        data = np.frombuffer(take(8 * n_items), dtype="<f8").reshape(shape)
        arrays[name] = np.array(data, dtype=np.float64)
    if pos != len(blob):
        raise StoreError(f"trailing bytes in {path}")
    if expect_kind is not None and kind != expect_kind:
        raise StoreError(f"expected kind {expect_kind}, found {kind} in {path}")
    return kind, fingerprint, arrays
