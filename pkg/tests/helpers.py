"""Shared test utilities: small configurations that keep tests fast."""

import numpy as np

from bevloc.config import Config, load_config


def deep_update(base: dict, extra: dict) -> dict:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            deep_update(base[key], value)
        else:
            base[key] = value
    return base


def make_desk_config(**overrides) -> Config:
    """Default config shrunk to desk scale: small scene, images, and model."""
    data = {
        "world": {
            "extent": [40.0, 20.0],
            "image_size": [24, 32],
            "view_spacing": 6.0,
        },
        "grid": {
            "cell_size": 0.25,
            "map_extent": [32.0, 12.0],
            "query_depth": 12.0,
            "query_width": 12.0,
            "overhead_gsd": 0.25,
        },
        "encoder": {
            "conv_channels": [8, 12, 12],
            "feature_dim": 16,
            "num_depth_planes": 10,
            "max_depth": 24.0,
            "num_height_planes": 8,
            "min_height": -3.0,
            "max_height": 5.0,
            "mlp_hidden": 16,
            "overhead_channels": [8, 12],
        },
        "matching": {"dim": 8},
        "ransac": {"train_hypotheses": 512, "eval_hypotheses": 1024},
        "training": {"num_negatives": 15},
    }
    deep_update(data, overrides)
    return load_config(overrides=data)


def make_micro_config(**overrides) -> Config:
    """Tiny config for training and finite-difference tests (fast forwards)."""
    data = {
        "world": {
            "extent": [24.0, 16.0],
            "image_size": [16, 24],
            "view_spacing": 8.0,
        },
        "grid": {
            "cell_size": 0.5,
            "map_extent": [16.0, 8.0],
            "query_depth": 6.0,
            "query_width": 6.0,
            "overhead_gsd": 0.5,
        },
        "encoder": {
            "conv_channels": [4, 6, 6],
            "feature_dim": 8,
            "num_depth_planes": 6,
            "max_depth": 16.0,
            "num_height_planes": 4,
            "min_height": -3.0,
            "max_height": 3.0,
            "num_best_views": 2,
            "mlp_hidden": 8,
            "overhead_channels": [4, 6],
        },
        "matching": {"dim": 4},
        "ransac": {"train_hypotheses": 128, "eval_hypotheses": 256, "score_chunk": 512},
        "training": {"num_negatives": 7},
    }
    deep_update(data, overrides)
    return load_config(overrides=data)


def make_small_config(**overrides) -> Config:
    """Micro-capacity model on a world large enough for hard-split episodes.

    Hard episodes need query poses more than 10 m from every mapping view
    that still see the reference grid; that takes a wider world, sparser
    views, and a deeper query frustum than the micro layout offers.
    """
    data = {
        "world": {
            "extent": [40.0, 24.0],
            "image_size": [16, 24],
            "view_spacing": 12.0,
        },
        "grid": {
            "cell_size": 0.5,
            "map_extent": [24.0, 12.0],
            "query_depth": 10.0,
            "query_width": 10.0,
            "overhead_gsd": 0.5,
        },
        "encoder": {
            "conv_channels": [4, 6, 6],
            "feature_dim": 8,
            "num_depth_planes": 8,
            "max_depth": 16.0,
            "num_height_planes": 4,
            "min_height": -3.0,
            "max_height": 3.0,
            "num_best_views": 2,
            "mlp_hidden": 8,
            "overhead_channels": [4, 6],
        },
        "matching": {"dim": 4},
        "ransac": {"train_hypotheses": 256, "eval_hypotheses": 512, "score_chunk": 512},
        "training": {"num_negatives": 7},
    }
    deep_update(data, overrides)
    return load_config(overrides=data)


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)
