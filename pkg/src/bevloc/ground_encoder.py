"""Ground-view encoder: class images to a bird's-eye-view neural map.

Each view is encoded into a per-pixel feature image plus a volume of
unnormalized depth scores over log-spaced depth planes. Map columns are then
filled by sampling vertical stacks of 3-D points: every point projects into
the closest views, pulls a feature and a depth score from each, and the views
are blended by a softmax over their depth scores — points that views agree are
occupied dominate their column. A small MLP maps the blended statistics
(mean, variance, top score) to a column feature, and columns pool vertically
by max.

All learnable weights live in a flat :class:`~bevloc.params.ParamVector`
under a name prefix (default ``ground.``), so the same functions serve the
standalone encoder and the jointly trained model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .config import EncoderConfig
from .geometry import Camera, MapGrid, NeuralMap, grid_sample_2d, sample_trilinear
from .params import ParamVector, SliceSpec, init_params
from .synthworld import GroundObservation

VARIANTS = ("full", "fixed_plane", "no_occupancy", "no_variance", "avg_vertical")

_NEG_INF = float("-inf")


@dataclass
class FeatureImage:
    """Per-pixel features at reduced resolution; ``stride`` input px per cell."""

    values: torch.Tensor  # (H', W', C)
    stride: int


@dataclass
class DepthScoreVolume:
    """Unnormalized depth-plane scores per feature pixel.

    ``plane_depths`` must be log-spaced (validated): trilinear lookups
    interpolate linearly in log-depth.
    """

    logits: torch.Tensor  # (H', W', P)
    plane_depths: np.ndarray  # (P,) metres, increasing
    stride: int

    def __post_init__(self):
        d = np.asarray(self.plane_depths, dtype=np.float64)
        if d.ndim != 1 or len(d) != self.logits.shape[-1]:
            raise ValueError("plane_depths must match the logits' last dim")
        if len(d) > 1:
            ratios = d[1:] / d[:-1]
            if d[0] <= 0 or np.abs(ratios / ratios[0] - 1).max() > 1e-9:
                raise ValueError("plane depths must be positive and log-spaced")
        self.plane_depths = d


@dataclass
class PointColumn:
    """Vertical stack of sample points over one map cell (mostly for tests)."""

    center: np.ndarray  # (2,) world xy
    heights: np.ndarray  # (K,) world z


def plane_depths(cfg: EncoderConfig) -> np.ndarray:
    return np.geomspace(cfg.min_depth, cfg.max_depth, cfg.num_depth_planes)


def encoder_param_spec(
    cfg: EncoderConfig, num_classes: int, prefix: str = "ground."
) -> list[SliceSpec]:
    c1, c2, c3 = cfg.conv_channels
    fd = cfg.feature_dim
    hid = cfg.mlp_hidden
    return [
        (prefix + "conv1.w", (c1, num_classes, 3, 3)),
        (prefix + "conv1.b", (c1,)),
        (prefix + "conv2.w", (c2, c1, 3, 3)),
        (prefix + "conv2.b", (c2,)),
        (prefix + "conv3.w", (c2, c2, 3, 3)),
        (prefix + "conv3.b", (c2,)),
        (prefix + "conv4.w", (c3, c1 + c2, 3, 3)),
        (prefix + "conv4.b", (c3,)),
        (prefix + "feat.w", (fd, c3, 1, 1)),
        (prefix + "feat.b", (fd,)),
        (prefix + "depth.w", (cfg.num_depth_planes, c3, 1, 1)),
        (prefix + "depth.b", (cfg.num_depth_planes,)),
        (prefix + "mlp.w1", (hid, 2 * fd + 1)),
        (prefix + "mlp.b1", (hid,)),
        (prefix + "mlp.w2", (hid, hid)),
        (prefix + "mlp.b2", (hid,)),
        (prefix + "mlp.w3", (fd, hid)),
        (prefix + "mlp.b3", (fd,)),
    ]


def init_encoder_params(
    cfg: EncoderConfig,
    num_classes: int,
    rng: np.random.Generator,
    dtype: torch.dtype = torch.float32,
) -> ParamVector:
    """Standalone ground-encoder parameters (EncoderParams)."""
    return init_params(encoder_param_spec(cfg, num_classes), rng, dtype)


def encode_image(
    params: ParamVector,
    observation: GroundObservation,
    cfg: EncoderConfig,
    prefix: str = "ground.",
) -> tuple[FeatureImage, DepthScoreVolume]:
    """Run the convolutional trunk on one view's appearance image."""
    app = observation.appearance
    x = torch.as_tensor(app, dtype=params.dtype).permute(2, 0, 1).unsqueeze(0)

    def conv(t, name, stride):
        return F.conv2d(t, params[prefix + name + ".w"], params[prefix + name + ".b"],
                        stride=stride, padding=params[prefix + name + ".w"].shape[-1] // 2)

    h1 = torch.tanh(conv(x, "conv1", cfg.stride))
    h2 = torch.tanh(conv(h1, "conv2", 2))
    h3 = torch.tanh(conv(h2, "conv3", 1))
    up = F.interpolate(h3, size=h1.shape[-2:], mode="bilinear", align_corners=False)
    h4 = torch.tanh(conv(torch.cat([h1, up], dim=1), "conv4", 1))
    feats = conv(h4, "feat", 1)[0].permute(1, 2, 0)
    logits = conv(h4, "depth", 1)[0].permute(1, 2, 0)
    return (
        FeatureImage(values=feats, stride=cfg.stride),
        DepthScoreVolume(logits=logits, plane_depths=plane_depths(cfg), stride=cfg.stride),
    )


def sample_feature_image(fi: FeatureImage, pixels: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup of a feature image at input-image pixel coordinates."""
    s = float(fi.stride)
    u = (pixels[..., 0] + 0.5) / s - 0.5
    v = (pixels[..., 1] + 0.5) / s - 0.5
    return grid_sample_2d(fi.values, v, u)


def column_heights(cameras: list[Camera], cfg: EncoderConfig, variant: str) -> np.ndarray:
    """World z values sampled per column, tied to the mean camera height."""
    ref_z = float(np.mean([cam.pose.t[2] for cam in cameras]))
    if variant == "fixed_plane":
        return np.array([ref_z + cfg.fixed_plane_height])
    return ref_z + np.linspace(cfg.min_height, cfg.max_height, cfg.num_height_planes)


def _lift_points(
    view_data: list[tuple[Camera, FeatureImage, DepthScoreVolume]],
    centers: np.ndarray,  # (M, 2) world xy
    heights: np.ndarray,  # (K,) world z
    params: ParamVector,
    cfg: EncoderConfig,
    prefix: str,
    variant: str,
    collect_debug: bool = False,
):
    """Blend per-view samples at a lattice of 3-D points and run the MLP.

    Returns ``(X, observed[, debug])``: MLP outputs ``(M, K, fd)`` and the
    per-point observation mask ``(M, K)``.
    """
    n_views = len(view_data)
    m, k = len(centers), len(heights)
    dtype = params.dtype
    pts = np.concatenate(
        [
            np.repeat(centers, k, axis=0),
            np.tile(heights, m)[:, None],
        ],
        axis=1,
    )  # (M*K, 3)

    pix_list, depth_list, valid_list, dist_list = [], [], [], []
    for cam, _, _ in view_data:
        pix, depth = cam.project(pts)
        valid = (depth > 1e-6) & cam.in_bounds(pix)
        dist = np.linalg.norm(centers - cam.pose.t[:2], axis=1)
        pix_list.append(np.nan_to_num(pix, nan=0.0))
        depth_list.append(np.maximum(depth, 1e-6))
        valid_list.append(valid)
        dist_list.append(dist)

    valid = torch.as_tensor(np.stack(valid_list))  # (N, M*K) bool
    dist = torch.as_tensor(np.stack(dist_list))  # (N, M)

    # keep only the n_best closest views per point (ties by view index)
    order = torch.argsort(dist, dim=0, stable=True)  # (N, M)
    order_pts = order.repeat_interleave(k, dim=1)  # (N, M*K)
    valid_ord = torch.gather(valid, 0, order_pts)
    ranked = torch.cumsum(valid_ord.to(torch.int32), dim=0)
    sel_ord = valid_ord & (ranked <= cfg.num_best_views)
    selected = torch.zeros_like(valid)
    selected.scatter_(0, order_pts, sel_ord)

    feats, scores = [], []
    for n, (cam, fi, vol) in enumerate(view_data):
        pix_t = torch.as_tensor(pix_list[n], dtype=dtype)
        depth_t = torch.as_tensor(depth_list[n], dtype=dtype)
        feats.append(sample_feature_image(fi, pix_t))
        scores.append(sample_trilinear(vol, pix_t, depth_t))
    f_all = torch.stack(feats)  # (N, M*K, fd)
    s_all = torch.stack(scores)  # (N, M*K)

    observed = selected.any(dim=0)  # (M*K,)
    if variant == "no_occupancy":
        counts = selected.sum(dim=0).to(dtype)
        w = selected.to(dtype) / counts.clamp_min(1.0)
    else:
        z = s_all.masked_fill(~selected, _NEG_INF)
        zmax = z.max(dim=0).values
        zmax = torch.where(observed, zmax, torch.zeros_like(zmax))
        expz = torch.exp(z - zmax) * selected.to(dtype)
        w = expz / expz.sum(dim=0).clamp_min(1e-30)

    wf = w.unsqueeze(-1)
    mu = (wf * f_all).sum(dim=0)  # (M*K, fd)
    var = (wf * (f_all - mu) ** 2).sum(dim=0)
    if variant == "no_variance":
        var = torch.zeros_like(var)
    smax = s_all.masked_fill(~selected, _NEG_INF).max(dim=0).values
    smax = torch.where(observed, smax, torch.zeros_like(smax))

    inp = torch.cat([mu, var, smax.unsqueeze(-1)], dim=-1)
    h = torch.tanh(inp @ params[prefix + "mlp.w1"].T + params[prefix + "mlp.b1"])
    h = torch.tanh(h @ params[prefix + "mlp.w2"].T + params[prefix + "mlp.b2"])
    x = h @ params[prefix + "mlp.w3"].T + params[prefix + "mlp.b3"]

    x = x.view(m, k, -1)
    observed = observed.view(m, k)
    if collect_debug:
        debug = {
            "weights": w.view(n_views, m, k),
            "selected": selected.view(n_views, m, k),
            "scores": s_all.view(n_views, m, k),
            "feats": f_all.view(n_views, m, k, -1),
            "dist": dist,
            "mu": mu.view(m, k, -1),
            "var": var.view(m, k, -1),
            "smax": smax.view(m, k),
        }
        return x, observed, debug
    return x, observed


def _pool_columns(x: torch.Tensor, observed: torch.Tensor, variant: str):
    """Vertical pooling over the K sample heights of each column."""
    if variant == "avg_vertical":
        wsum = observed.to(x.dtype).unsqueeze(-1)
        pooled = (x * wsum).sum(dim=1) / wsum.sum(dim=1).clamp_min(1.0)
    else:
        pooled = x.masked_fill(~observed.unsqueeze(-1), _NEG_INF).max(dim=1).values
    valid = observed.any(dim=1)
    pooled = torch.where(valid.unsqueeze(-1), pooled, torch.zeros_like(pooled))
    return pooled, valid


def lift_column(
    view_data: list[tuple[Camera, FeatureImage, DepthScoreVolume]],
    column: PointColumn,
    params: ParamVector,
    cfg: EncoderConfig,
    prefix: str = "ground.",
    variant: str = "full",
    collect_debug: bool = False,
):
    """Lift a single map column; returns ``(feature (fd,), valid bool[, debug])``."""
    out = _lift_points(
        view_data,
        column.center[None, :],
        column.heights,
        params,
        cfg,
        prefix,
        variant,
        collect_debug,
    )
    x, observed = out[0], out[1]
    pooled, valid = _pool_columns(x, observed, variant)
    if collect_debug:
        return pooled[0], bool(valid[0]), out[2]
    return pooled[0], bool(valid[0])


_CELL_CHUNK = 4096


def encode_ground(
    params: ParamVector,
    views: list[GroundObservation],
    grid: MapGrid,
    cfg: EncoderConfig,
    prefix: str = "ground.",
    variant: str | None = None,
) -> NeuralMap:
    """Encode posed ground views into a neural map on ``grid``.

    Cells whose vertical sample points fall outside every view's frustum come
    back invalid (zero features). ``variant`` overrides ``cfg.variant``.
    """
    variant = variant or cfg.variant
    if variant not in VARIANTS:
        raise ValueError(f"unknown encoder variant {variant!r}")
    if not views:
        raise ValueError("need at least one view")
    view_data = [(v.camera, *encode_image(params, v, cfg, prefix)) for v in views]
    heights = column_heights([v.camera for v in views], cfg, variant)
    centers = grid.cell_centers()
    feats, valids = [], []
    for start in range(0, len(centers), _CELL_CHUNK):
        x, observed = _lift_points(
            view_data, centers[start : start + _CELL_CHUNK], heights, params, cfg,
            prefix, variant,
        )
        pooled, valid = _pool_columns(x, observed, variant)
        feats.append(pooled)
        valids.append(valid)
    features = torch.cat(feats).view(*grid.shape, -1)
    valid = torch.cat(valids).view(grid.shape)
    return NeuralMap(grid, features, valid)


def encode_ground_variant(
    params: ParamVector,
    views: list[GroundObservation],
    grid: MapGrid,
    cfg: EncoderConfig,
    variant: str,
    prefix: str = "ground.",
) -> NeuralMap:
    """Encode with an explicit ablation variant (see :data:`VARIANTS`)."""
    return encode_ground(params, views, grid, cfg, prefix=prefix, variant=variant)
