"""GCSF raster container.

Layout (all little-endian)::

    b"GCSF" | u32 version | u32 nx | u32 ny | u32 n_channels | u32 n_timesteps
    f32 payload, shape (n_channels, n_timesteps, ny, nx), C order

Static fields use ``n_timesteps == 1``.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GCSF"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


class FormatError(ValueError):
    """Raised when a binary file does not match its declared layout."""


def write_gcsf(path: str | os.PathLike, data: np.ndarray) -> None:
    """Write a (n_channels, n_timesteps, ny, nx) array as GCSF.

    The file is written to a temporary sibling and renamed, so a reader never
    sees a half-written raster.
    """
    data = np.asarray(data)
    if data.ndim != 4:
        raise ValueError(f"expected 4-D (channel, time, y, x) array, got shape {data.shape}")
    n_channels, n_times, ny, nx = data.shape
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, nx, ny, n_channels, n_times))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_gcsf(path: str | os.PathLike) -> np.ndarray:
    """Read a GCSF file into a float64 (n_channels, n_timesteps, ny, nx) array."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, nx, ny, n_channels, n_times = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = n_channels * n_times * ny * nx * 4
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(n_channels, n_times, ny, nx)
    return arr.astype(np.float64)
