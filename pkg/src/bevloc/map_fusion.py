"""Combining neural maps: cross-modality fusion and spatial stitching.

Fusion merges maps that live on the *same* grid (channel-wise max by default,
mean as an ablation); stitching lays tiles that share cell size and axis
orientation onto one larger canvas at integer cell offsets, max-merging any
overlap. Both treat invalid cells as absent: they never contribute values,
and a cell is valid in the result iff it is valid in at least one input.
"""

from __future__ import annotations

import torch

from .geometry import MapGrid, NeuralMap, PoseSE2, grids_equal, wrap_angle

FUSE_MODES = ("max", "avg")

_NEG_INF = float("-inf")


def fuse(maps: list[NeuralMap], mode: str = "max") -> NeuralMap:
    """Merge maps on a shared grid, cell-wise and channel-wise.

    ``max`` keeps the strongest response per channel among valid inputs;
    ``avg`` takes their mean. Cells invalid everywhere stay invalid (zeros).
    """
    if not maps:
        raise ValueError("need at least one map")
    if mode not in FUSE_MODES:
        raise ValueError(f"unknown fuse mode {mode!r}")
    grid = maps[0].grid
    fd = maps[0].feature_dim
    for m in maps[1:]:
        if not grids_equal(grid, m.grid):
            raise ValueError("fuse requires identical grids")
        if m.feature_dim != fd:
            raise ValueError("fuse requires matching feature dims")
    feats = torch.stack([m.features for m in maps])  # (T, I, J, F)
    masks = torch.stack([m.valid for m in maps])  # (T, I, J)
    any_valid = masks.any(dim=0)
    if mode == "max":
        filled = feats.masked_fill(~masks.unsqueeze(-1), _NEG_INF)
        merged = filled.max(dim=0).values
        merged = torch.where(any_valid.unsqueeze(-1), merged, torch.zeros_like(merged))
    else:
        w = masks.unsqueeze(-1).to(feats.dtype)
        merged = (feats * w).sum(dim=0) / w.sum(dim=0).clamp_min(1.0)
    return NeuralMap(grid, merged, any_valid)


def fuse_variant(maps: list[NeuralMap], mode: str) -> NeuralMap:
    """Explicit-mode fusion (ablation entry point)."""
    return fuse(maps, mode=mode)


def _integer_offset(base: MapGrid, tile: MapGrid) -> tuple[int, int]:
    rel = base.origin.inverse().compose(tile.origin)
    if abs(wrap_angle(rel.angle)) > 1e-9:
        raise ValueError("stitch requires axis-aligned tiles (equal grid headings)")
    off = rel.t / base.cell_size
    rounded = [round(o) for o in off]
    if max(abs(off[0] - rounded[0]), abs(off[1] - rounded[1])) > 1e-6:
        raise ValueError(f"tile offset {off} is not an integer number of cells")
    return int(rounded[0]), int(rounded[1])


def stitch(tiles: list[NeuralMap]) -> NeuralMap:
    """Compose tiles into one map covering their bounding rectangle.

    Tiles must share cell size, feature dim, and grid heading, and sit at
    integer cell offsets from each other. Overlaps merge by cell-wise max;
    cells covered by no tile are invalid.
    """
    if not tiles:
        raise ValueError("need at least one tile")
    base = tiles[0].grid
    fd = tiles[0].feature_dim
    offsets = []
    for t in tiles:
        if abs(t.grid.cell_size - base.cell_size) > 1e-9:
            raise ValueError("stitch requires a common cell size")
        if t.feature_dim != fd:
            raise ValueError("stitch requires matching feature dims")
        offsets.append(_integer_offset(base, t.grid))

    i0 = min(o[0] for o in offsets)
    j0 = min(o[1] for o in offsets)
    i1 = max(o[0] + t.grid.shape[0] for o, t in zip(offsets, tiles))
    j1 = max(o[1] + t.grid.shape[1] for o, t in zip(offsets, tiles))
    shape = (i1 - i0, j1 - j0)
    origin = base.origin.compose(
        PoseSE2(0.0, (i0 * base.cell_size, j0 * base.cell_size))
    )
    grid = MapGrid(origin, base.cell_size, shape)

    dtype = tiles[0].features.dtype
    canvas = torch.full((*shape, fd), _NEG_INF, dtype=dtype)
    valid = torch.zeros(shape, dtype=torch.bool)
    for (oi, oj), tile in zip(offsets, tiles):
        si = slice(oi - i0, oi - i0 + tile.grid.shape[0])
        sj = slice(oj - j0, oj - j0 + tile.grid.shape[1])
        patch = tile.features.masked_fill(~tile.valid.unsqueeze(-1), _NEG_INF)
        canvas[si, sj] = torch.maximum(canvas[si, sj], patch.to(dtype))
        valid[si, sj] |= tile.valid
    canvas = torch.where(valid.unsqueeze(-1), canvas, torch.zeros_like(canvas))
    return NeuralMap(grid, canvas, valid)
