"""Configuration dataclasses and YAML loading.

Every tunable lives here with its default; ``defaults.yaml`` ships the same
values in file form for users to copy and edit. ``load_config`` deep-merges a
user file over the defaults, so partial configs are fine.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml


@dataclass
class WorldConfig:
    """Procedural street-scene generator settings."""

    extent: tuple[float, float] = (72.0, 26.0)  # scene footprint, metres
    num_classes: int = 7  # background, ground, marking, curb, pole, tree, facade
    road_half_width: float = 4.0
    pole_density: float = 0.006  # expected poles per square metre
    tree_density: float = 0.004
    marking_density: float = 0.02  # random road patches per square metre of road
    facade_fill: float = 0.7  # fraction of each street side fronted by walls
    appearance_jitter: float = 0.3  # scale of per-epoch class-code perturbation
    camera_height: float = 2.5
    image_size: tuple[int, int] = (48, 64)  # (H, W) pixels
    hfov_deg: float = 90.0
    view_spacing: float = 5.0  # metres between mapping frames
    view_sides: str = "both"  # "both": left+right view per frame; "forward"
    heading_jitter_deg: float = 20.0
    lateral_jitter: float = 0.5


@dataclass
class GridConfig:
    """Metric grids for reference and query maps."""

    cell_size: float = 0.2
    map_extent: tuple[float, float] = (64.0, 16.0)  # reference grid, metres
    query_depth: float = 16.0  # forward reach of the query grid
    query_width: float = 16.0
    overhead_gsd: float = 0.2  # overhead raster resolution


@dataclass
class EncoderConfig:
    """Ground/overhead encoder architecture and lifting geometry."""

    conv_channels: tuple[int, int, int] = (64, 96, 96)
    feature_dim: int = 128
    stride: int = 2  # feature-image downsampling factor
    num_depth_planes: int = 32  # log-spaced depth scores per pixel
    min_depth: float = 0.5
    max_depth: float = 40.0
    num_height_planes: int = 60  # vertical samples per map column
    min_height: float = -4.0  # relative to camera height, metres
    max_height: float = 8.0
    num_best_views: int = 4  # closest views blended per 3-D point
    mlp_hidden: int = 128
    overhead_channels: tuple[int, int] = (64, 96)
    variant: str = "full"  # full|fixed_plane|no_occupancy|no_variance|avg_vertical
    fixed_plane_height: float = -2.5  # single sample plane for the ablation


@dataclass
class MatchingConfig:
    dim: int = 32  # matching-feature dimensionality after projection


@dataclass
class RansacConfig:
    train_hypotheses: int = 10000
    eval_hypotheses: int = 20000
    oversample: int = 8  # candidate pairs drawn per kept hypothesis
    score_chunk: int = 1024  # poses scored per batch (memory knob only)


@dataclass
class RefineConfig:
    window_xy: float = 4.0  # full window width, metres
    window_angle_deg: float = 5.0
    step_xy: float = 0.2
    step_angle_deg: float = 0.5


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    total_steps: int = 20000
    constant_fraction: float = 0.5  # fraction of steps before cosine decay
    batch_size: int = 1  # episodes averaged per update
    num_negatives: int = 255
    modality_dropout: float = 0.2  # chance of dropping each map source
    near_duplicate_xy: float = 0.2  # negatives this close to truth are skipped
    near_duplicate_deg: float = 0.5
    temperature_init: float = 0.0  # initial log-temperature


@dataclass
class EvalConfig:
    recall_thresholds: tuple[tuple[float, float], ...] = ((2.5, 5.0), (5.0, 10.0))
    auc_max_error: float = 5.0  # metres; AUC integrates recall out to here
    easy_max_dist: float = 10.0
    easy_max_angle_deg: float = 45.0
    hard_min_dist: float = 10.0
    hard_min_angle_deg: float = 60.0
    min_frustum_overlap: float = 0.3  # query frustum fraction inside ref grid


@dataclass
class Config:
    world: WorldConfig = field(default_factory=WorldConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    matching: MatchingConfig = field(default_factory=MatchingConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    precision: str = "single"  # single|double


_PRECISION_DTYPES = {"single": "float32", "double": "float64"}


def torch_dtype(precision: str):
    import torch

    try:
        return getattr(torch, _PRECISION_DTYPES[precision])
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}") from None


def _coerce(ftype, value):
    origin = typing.get_origin(ftype)
    if dataclasses.is_dataclass(ftype):
        return _from_dict(ftype, value)
    if origin is tuple:
        args = typing.get_args(ftype)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v) for v in value)
        return tuple(_coerce(a, v) for a, v in zip(args, value))
    if ftype is float:
        return float(value)
    if ftype is int:
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"expected integer, got {value}")
        return int(value)
    if ftype is bool:
        return bool(value)
    if ftype is str:
        return str(value)
    return value


def _from_dict(cls, data: dict):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValueError(f"expected mapping for {cls.__name__}, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(fields[name].type, value)
    return cls(**kwargs)


def _resolve_types(cls):
    # dataclass field.type may be a string under `from __future__ import annotations`
    hints = typing.get_type_hints(cls)
    for f in dataclasses.fields(cls):
        f.type = hints[f.name]


for _cls in (
    WorldConfig,
    GridConfig,
    EncoderConfig,
    MatchingConfig,
    RansacConfig,
    RefineConfig,
    TrainConfig,
    EvalConfig,
    Config,
):
    _resolve_types(_cls)


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def config_to_dict(config: Config) -> dict:
    def conv(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: conv(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [conv(v) for v in obj]
        return obj

    return conv(config)


def config_from_dict(data: dict) -> Config:
    return _from_dict(Config, data)


def default_config_text() -> str:
    return resources.files("bevloc").joinpath("defaults.yaml").read_text()


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> Config:
    """Build a config: packaged defaults <- optional YAML file <- overrides."""
    data = yaml.safe_load(default_config_text()) or {}
    if path is not None:
        with open(path) as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ValueError(f"config file {path} must contain a mapping")
        data = _deep_merge(data, user)
    if overrides:
        data = _deep_merge(data, overrides)
    return config_from_dict(data)


def dump_config(config: Config) -> str:
    return yaml.safe_dump(config_to_dict(config), sort_keys=False)
