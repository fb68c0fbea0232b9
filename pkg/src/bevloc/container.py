"""Self-describing array containers for scenes, episodes, and checkpoints.

Everything persistent rides on numpy ``.npz`` archives (uncompressed, fixed
zip timestamps, so identical content gives identical bytes) with a JSON
metadata entry. Map tiles use their own binary format (see ``tiles.py``).
"""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

from .config import Config, config_from_dict, config_to_dict
from .geometry import Camera, MapGrid, PoseSE2
from .synthworld import (
    Episode,
    GroundObservation,
    OverheadRaster,
    Reference,
    SceneSpec,
)

_META_KEY = "__meta__"


def save_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None):
    """Write arrays + JSON metadata to an ``.npz`` file."""
    payload = dict(arrays)
    if _META_KEY in payload:
        raise ValueError(f"{_META_KEY} is reserved")
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    payload[_META_KEY] = np.frombuffer(blob, dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files if k != _META_KEY}
        meta = json.loads(bytes(data[_META_KEY].tobytes()).decode()) if _META_KEY in data.files else {}
    return arrays, meta


def container_bytes(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    payload = dict(arrays)
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    payload[_META_KEY] = np.frombuffer(blob, dtype=np.uint8)
    np.savez(buf, **payload)
    return buf.getvalue()


# ------------------------------------------------------------------- scenes


def scene_to_arrays(scene: SceneSpec) -> tuple[dict[str, np.ndarray], dict]:
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in scene.arrays().items()}
    meta = {
        "kind": "scene",
        "seed": scene.seed,
        "extent": list(scene.extent),
        "road_center_y": scene.road_center_y,
        "road_half_width": scene.road_half_width,
    }
    return arrays, meta


def scene_from_arrays(arrays: dict[str, np.ndarray], meta: dict) -> SceneSpec:
    return SceneSpec(
        seed=int(meta["seed"]),
        extent=tuple(float(v) for v in meta["extent"]),
        road_center_y=float(meta["road_center_y"]),
        road_half_width=float(meta["road_half_width"]),
        poles=arrays["poles"].reshape(-1, 4),
        trees=arrays["trees"].reshape(-1, 5),
        facades=arrays["facades"].reshape(-1, 4),
        markings=arrays["markings"].reshape(-1, 5),
        curbs=arrays["curbs"].reshape(-1, 4),
    )


def scene_bytes(scene: SceneSpec) -> bytes:
    arrays, meta = scene_to_arrays(scene)
    return container_bytes(arrays, meta)


# ------------------------------------------------------------------ episodes


def _camera_params(cam: Camera) -> np.ndarray:
    return np.array(
        [
            cam.pose.t[0],
            cam.pose.t[1],
            cam.pose.t[2],
            cam.heading,
            cam.fx,
            cam.fy,
            cam.cx,
            cam.cy,
            cam.size[0],
            cam.size[1],
        ],
        dtype=np.float64,
    )


def _camera_from_params(p: np.ndarray) -> Camera:
    return Camera.level(
        (p[0], p[1], p[2]), p[3], p[4], p[5], p[6], p[7], (int(p[8]), int(p[9]))
    )


def _grid_params(grid: MapGrid) -> np.ndarray:
    return np.array(
        [
            grid.origin.angle,
            grid.origin.t[0],
            grid.origin.t[1],
            grid.cell_size,
            grid.shape[0],
            grid.shape[1],
        ],
        dtype=np.float64,
    )


def _grid_from_params(p: np.ndarray) -> MapGrid:
    return MapGrid(
        PoseSE2(p[0], np.array([p[1], p[2]])), float(p[3]), (int(p[4]), int(p[5]))
    )


def _views_to_arrays(views, prefix: str) -> dict[str, np.ndarray]:
    return {
        f"{prefix}_cameras": np.stack([_camera_params(v.camera) for v in views]),
        f"{prefix}_labels": np.stack([v.labels for v in views]).astype(np.uint8),
        f"{prefix}_depth": np.stack([v.depth for v in views]).astype(np.float64),
        f"{prefix}_appearance": np.stack([v.appearance for v in views]).astype(np.float32),
        f"{prefix}_epochs": np.array([v.epoch for v in views], dtype=np.int64),
    }


def _views_from_arrays(arrays, prefix: str):
    cams = arrays[f"{prefix}_cameras"]
    labels = arrays[f"{prefix}_labels"].astype(np.int64)
    depth = arrays[f"{prefix}_depth"]
    appearance = arrays[f"{prefix}_appearance"]
    epochs = arrays[f"{prefix}_epochs"]
    return [
        GroundObservation(
            camera=_camera_from_params(cams[k]),
            labels=labels[k],
            depth=depth[k],
            epoch=int(epochs[k]),
            appearance=appearance[k],
        )
        for k in range(len(cams))
    ]


def episode_to_arrays(ep: Episode) -> tuple[dict[str, np.ndarray], dict]:
    arrays = _views_to_arrays(ep.reference.views, "map")
    arrays.update(_views_to_arrays([ep.query_view], "query"))
    arrays["overhead_labels"] = ep.reference.overhead.labels.astype(np.uint8)
    arrays["overhead_grid"] = _grid_params(ep.reference.overhead.grid)
    arrays["ref_grid"] = _grid_params(ep.reference.grid)
    arrays["gt_pose"] = np.array(
        [ep.gt_pose.angle, ep.gt_pose.t[0], ep.gt_pose.t[1]], dtype=np.float64
    )
    meta = {
        "kind": "episode",
        "scene_seed": ep.scene_seed,
        "difficulty": ep.difficulty,
        "map_epoch": ep.reference.epoch,
        "overhead_gsd": ep.reference.overhead.gsd,
    }
    return arrays, meta


def episode_from_arrays(arrays: dict[str, np.ndarray], meta: dict) -> Episode:
    overhead = OverheadRaster(
        grid=_grid_from_params(arrays["overhead_grid"]),
        labels=arrays["overhead_labels"].astype(np.int64),
        gsd=float(meta["overhead_gsd"]),
    )
    reference = Reference(
        views=tuple(_views_from_arrays(arrays, "map")),
        overhead=overhead,
        grid=_grid_from_params(arrays["ref_grid"]),
        epoch=int(meta["map_epoch"]),
    )
    query = _views_from_arrays(arrays, "query")[0]
    gt = arrays["gt_pose"]
    return Episode(
        scene_seed=int(meta["scene_seed"]),
        reference=reference,
        query_view=query,
        gt_pose=PoseSE2(float(gt[0]), gt[1:3].copy()),
        difficulty=str(meta["difficulty"]),
    )


def save_episodes(path, episodes: list[Episode], config: Config | None = None):
    arrays: dict[str, np.ndarray] = {}
    metas = []
    for k, ep in enumerate(episodes):
        a, m = episode_to_arrays(ep)
        arrays.update({f"ep{k}/{name}": v for name, v in a.items()})
        metas.append(m)
    meta = {"kind": "episodes", "count": len(episodes), "episodes": metas}
    if config is not None:
        meta["config"] = config_to_dict(config)
    save_container(path, arrays, meta)


def load_episodes(path) -> tuple[list[Episode], Config | None]:
    arrays, meta = load_container(path)
    if meta.get("kind") != "episodes":
        raise ValueError(f"{path} is not an episode container")
    episodes = []
    for k in range(int(meta["count"])):
        sub = {
            name[len(f"ep{k}/") :]: v
            for name, v in arrays.items()
            if name.startswith(f"ep{k}/")
        }
        episodes.append(episode_from_arrays(sub, meta["episodes"][k]))
    config = config_from_dict(meta["config"]) if "config" in meta else None
    return episodes, config
