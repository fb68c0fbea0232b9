"""Neural bird's-eye-view maps and 3-DoF localization on procedural street scenes.

The package turns posed ground-level views and an overhead raster of a synthetic
street scene into per-modality neural maps on a common metric grid, fuses them,
and aligns a query map against a reference map with a sampling-based SE(2) solver
trained contrastively against ground-truth poses.
"""

import torch as _torch

# All numerics run single-threaded so results never depend on the host's core
# count; parallelism happens at episode granularity (see harness/CLI `--threads`).
_torch.set_num_threads(1)

from .geometry import Camera, MapGrid, NeuralMap, PoseSE2, PoseSE3  # noqa: E402
from .config import Config, load_config  # noqa: E402

__all__ = [
    "Camera",
    "Config",
    "MapGrid",
    "NeuralMap",
    "PoseSE2",
    "PoseSE3",
    "load_config",
]

__version__ = "0.1.0"
