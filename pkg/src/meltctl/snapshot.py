"""Field snapshot serialization.

Layout: a little-endian header followed by the temperatures as 32-bit
floats, i fastest, then j, then k:

    magic   4 bytes  b"MCTS"
    version uint32   currently 1
    nx, ny, nz uint32
    dx, dy, dz float64  (m)
    layer   int32    build layer the snapshot was taken after
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"MCTS"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIdddi")


@dataclass(frozen=True)
class SnapshotHeader:
    nx: int
    ny: int
    nz: int
    dx: float
    dy: float
    dz: float
    layer: int


def write_snapshot(path, field: np.ndarray, dx: float, dy: float, dz: float,
                   layer: int) -> None:
    """``field`` is (nz, ny, nx); C order already puts i fastest."""
    field = np.ascontiguousarray(field, dtype="<f4")
    nz, ny, nx = field.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, nx, ny, nz, dx, dy, dz, layer))
        fh.write(field.tobytes())


def read_snapshot(path) -> tuple[SnapshotHeader, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) != _HEADER.size:
            raise ValueError(f"{path}: truncated snapshot header")
        magic, version, nx, ny, nz, dx, dy, dz, layer = _HEADER.unpack(raw)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a snapshot file")
        if version != VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != nx * ny * nz:
        raise ValueError(f"{path}: expected {nx * ny * nz} values, "
                         f"got {data.size}")
    header = SnapshotHeader(nx, ny, nz, dx, dy, dz, layer)
    return header, data.reshape(nz, ny, nx).astype(np.float32)


def write_summary_csv(path, rows: list[tuple[int, np.ndarray]]) -> None:
    """Per-layer stats for a list of (layer, image) pairs."""
    with open(path, "w", newline="") as fh:
        fh.write("# meltctl-csv 1\n")
        fh.write("layer,min_K,max_K,mean_K\n")
        for layer, img in rows:
            fh.write(f"{layer},{float(img.min()):.6f},"
                     f"{float(img.max()):.6f},{float(img.mean()):.6f}\n")
