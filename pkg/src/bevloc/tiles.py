"""Binary map-tile files: versioned header, feature payload, validity, CRC.

Layout (all little-endian):

    offset  size  field
    0       8     magic  b"BEVTILE\\0"
    8       2     format version (u16), currently 1
    10      1     precision tag (u8): 0 = half, 1 = single
    11      1     reserved, 0
    12      32    grid origin (angle, tx, ty) and cell size, four f64
    44      12    I, J, feature_dim, three u32
    56      ...   feature payload, row-major (i-major), stored precision
    ...     ...   validity bitmask, one bit per cell, LSB-first
    last 4        CRC-32 of bytes 8 .. end-of-bitmask

Reading back returns float32 features; a half tile therefore round-trips
bit-exactly in its stored precision (upcasting halves is lossless).
"""

from __future__ import annotations

import struct
import zlib

import numpy as np
import torch

from .geometry import MapGrid, NeuralMap, PoseSE2

MAGIC = b"BEVTILE\x00"
VERSION = 1
_HEADER = struct.Struct("<8sHBBddddIII")
_PRECISIONS = {"half": 0, "single": 1}
_DTYPES = {0: np.float16, 1: np.float32}


class TileError(ValueError):
    """Malformed tile file (unknown magic, bad field, trailing bytes)."""


class TileVersionError(TileError):
    """The file is a tile, but from an unsupported format version."""


class TileTruncatedError(TileError):
    """The file ends before the payload, bitmask, or checksum completes."""


class TileChecksumError(TileError):
    """Stored CRC does not match the file contents."""


def payload_bytes(shape: tuple[int, int], feature_dim: int, precision: str) -> int:
    """Size of the feature payload alone for a given grid and precision."""
    itemsize = np.dtype(_DTYPES[_PRECISIONS[precision]]).itemsize
    return shape[0] * shape[1] * feature_dim * itemsize


def _mask_bytes(shape: tuple[int, int]) -> int:
    return (shape[0] * shape[1] + 7) // 8


def write_tile(nmap: NeuralMap, path, precision: str = "single") -> None:
    """Serialize a map; ``precision`` picks the stored payload dtype."""
    if precision not in _PRECISIONS:
        raise ValueError(f"unknown precision {precision!r}")
    tag = _PRECISIONS[precision]
    grid = nmap.grid
    i, j = grid.shape
    header = _HEADER.pack(
        MAGIC, VERSION, tag, 0,
        grid.origin.angle, float(grid.origin.t[0]), float(grid.origin.t[1]),
        grid.cell_size, i, j, nmap.feature_dim,
    )
    feats = nmap.features.detach().cpu().numpy().astype(_DTYPES[tag])
    payload = feats.astype("<" + feats.dtype.str[1:], copy=False).tobytes()
    mask = np.packbits(
        nmap.valid.detach().cpu().numpy().reshape(-1), bitorder="little"
    ).tobytes()
    body = header[len(MAGIC):] + payload + mask
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(body)
        fh.write(struct.pack("<I", crc))


def read_tile(path) -> NeuralMap:
    """Parse and validate a tile file; features come back as float32."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size + 4:
        if not blob.startswith(MAGIC[: len(blob)]) :
            raise TileError("not a tile file (bad magic)")
        raise TileTruncatedError(
            f"file is {len(blob)} bytes, shorter than any valid tile"
        )
    if not blob.startswith(MAGIC):
        raise TileError("not a tile file (bad magic)")
    (_, version, tag, _, angle, tx, ty, cell, i, j, dim) = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise TileVersionError(f"tile version {version}, reader supports {VERSION}")
    if tag not in _DTYPES:
        raise TileError(f"unknown precision tag {tag}")
    if min(i, j, dim) < 1 or cell <= 0:
        raise TileError("invalid grid metadata")

    dtype = np.dtype(_DTYPES[tag])
    n_payload = i * j * dim * dtype.itemsize
    n_mask = _mask_bytes((i, j))
    expected = _HEADER.size + n_payload + n_mask + 4
    if len(blob) < expected:
        raise TileTruncatedError(
            f"file is {len(blob)} bytes, tile header promises {expected}"
        )
    if len(blob) > expected:
        raise TileError(f"{len(blob) - expected} trailing bytes after checksum")

    (stored_crc,) = struct.unpack_from("<I", blob, expected - 4)
    crc = zlib.crc32(blob[len(MAGIC):expected - 4]) & 0xFFFFFFFF
    if crc != stored_crc:
        raise TileChecksumError(
            f"checksum mismatch: stored {stored_crc:#010x}, computed {crc:#010x}"
        )

    payload = np.frombuffer(
        blob, dtype=dtype.newbyteorder("<"), count=i * j * dim, offset=_HEADER.size
    )
    features = torch.from_numpy(
        payload.astype(np.float32).reshape(i, j, dim)
    )
    bits = np.frombuffer(
        blob, dtype=np.uint8, count=n_mask, offset=_HEADER.size + n_payload
    )
    valid = np.unpackbits(bits, count=i * j, bitorder="little").reshape(i, j)
    grid = MapGrid(PoseSE2(angle, np.array([tx, ty])), cell, (i, j))
    return NeuralMap(grid, features, torch.from_numpy(valid.astype(bool)))
