"""Overhead-raster encoder: top-down class image to a neural map.

The raster is one-hot embedded (aerial appearance is treated as epoch-stable),
pushed through a small stride-1 convolutional stack on its own lattice, and
bilinearly resampled onto the target map grid. Map cells whose centres fall
outside the raster's footprint are marked invalid.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .config import EncoderConfig
from .geometry import MapGrid, NeuralMap, grid_sample_2d
from .params import ParamVector, SliceSpec, init_params
from .synthworld import NUM_CLASSES, OverheadRaster


def overhead_param_spec(
    cfg: EncoderConfig, num_classes: int = NUM_CLASSES, prefix: str = "overhead."
) -> list[SliceSpec]:
    c1, c2 = cfg.overhead_channels
    return [
        (prefix + "conv1.w", (c1, num_classes, 3, 3)),
        (prefix + "conv1.b", (c1,)),
        (prefix + "conv2.w", (c2, c1, 3, 3)),
        (prefix + "conv2.b", (c2,)),
        (prefix + "head.w", (cfg.feature_dim, c2, 1, 1)),
        (prefix + "head.b", (cfg.feature_dim,)),
    ]


def init_overhead_params(
    cfg: EncoderConfig,
    rng: np.random.Generator,
    dtype: torch.dtype = torch.float32,
    num_classes: int = NUM_CLASSES,
) -> ParamVector:
    return init_params(overhead_param_spec(cfg, num_classes), rng, dtype)


def encode_overhead(
    params: ParamVector,
    raster: OverheadRaster,
    grid: MapGrid,
    cfg: EncoderConfig,
    prefix: str = "overhead.",
    num_classes: int = NUM_CLASSES,
) -> NeuralMap:
    """Encode an overhead class raster onto ``grid``."""
    labels = np.asarray(raster.labels)
    if labels.max(initial=0) >= num_classes:
        raise ValueError("raster contains labels outside the class set")
    onehot = np.eye(num_classes, dtype=np.float64)[labels]
    x = torch.as_tensor(onehot, dtype=params.dtype).permute(2, 0, 1).unsqueeze(0)
    h = torch.tanh(
        F.conv2d(x, params[prefix + "conv1.w"], params[prefix + "conv1.b"], padding=1)
    )
    h = torch.tanh(
        F.conv2d(h, params[prefix + "conv2.w"], params[prefix + "conv2.b"], padding=1)
    )
    planar = F.conv2d(h, params[prefix + "head.w"], params[prefix + "head.b"])[0]
    planar = planar.permute(1, 2, 0)  # (I', J', fd) on the raster lattice

    centers = grid.cell_centers()
    ri, rj = raster.grid.world_to_cell(centers)
    valid_np = raster.grid.contains_cell(ri, rj)
    u, v = raster.grid.world_to_grid(centers)
    feats = grid_sample_2d(
        planar,
        torch.as_tensor(u, dtype=params.dtype),
        torch.as_tensor(v, dtype=params.dtype),
    )
    valid = torch.as_tensor(valid_np.reshape(grid.shape))
    return NeuralMap(grid, feats.view(*grid.shape, -1), valid)
