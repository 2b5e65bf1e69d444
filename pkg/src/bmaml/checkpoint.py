"""Binary checkpoint of a particle set.

Layout (little-endian)::

    magic    4 bytes  b"BMLC"
    version  u32
    M        u32      number of particles
    dim      u64      parameters per particle
    payload  M*dim f64
    checksum u64      sum of payload bytes mod 2**64
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"BMLC"
VERSION = 1
HEADER = struct.Struct("<4sIIQ")
TRAILER = struct.Struct("<Q")


class CheckpointError(ValueError):
    """Malformed or truncated checkpoint file."""


class ChecksumError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


def checksum(payload: bytes) -> int:
    return int(np.frombuffer(payload, dtype=np.uint8).sum(dtype=np.uint64))


def encode(theta: np.ndarray) -> bytes:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim == 1:
        theta = theta[None, :]
    if theta.ndim != 2:
        raise ValueError(f"expected particles of shape (M, dim), got {theta.shape}")
    m, dim = theta.shape
    payload = theta.astype("<f8").tobytes()
    return HEADER.pack(MAGIC, VERSION, m, dim) + payload + TRAILER.pack(checksum(payload))


def decode(blob: bytes) -> np.ndarray:
    if len(blob) < HEADER.size:
        raise CheckpointError(f"file too short for header ({len(blob)} bytes)")
    magic, version, m, dim = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (reader supports {VERSION})")
    n = m * dim * 8
    expected = HEADER.size + n + TRAILER.size
    if len(blob) != expected:
        raise CheckpointError(f"expected {expected} bytes for M={m} dim={dim}, found {len(blob)}")
    payload = blob[HEADER.size : HEADER.size + n]
    (stored,) = TRAILER.unpack_from(blob, HEADER.size + n)
    if stored != checksum(payload):
        raise ChecksumError("checkpoint checksum mismatch")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(m, dim)


def save(path: str | os.PathLike, theta: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(theta))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> np.ndarray:
    return decode(Path(path).read_bytes())
