"""Procedural street scenes with analytic ground-view and overhead rendering.

A scene is a flat world (ground plane z=0) with a road corridor along ``+x``,
decorated with painted markings, curbs, poles, trees (trunk cylinder + crown
sphere) and building facades (vertical wall quads). Observations are class
images, not RGB: each pixel carries an integer class label plus a per-epoch
"appearance" embedding of that label, so the same geometry looks different
across epochs while staying decodable.

Rendering is exact ray casting against the analytic primitives — no meshes, no
z-buffer discretization — which makes depth/label consistency testable to
tight tolerances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .config import Config
from .geometry import Camera, MapGrid, PoseSE2, frustum_polygon, wrap_angle

# class labels (id order doubles as overhead tie-break priority, high wins)
BACKGROUND, GROUND, MARKING, CURB, POLE, TREE, FACADE = range(7)
NUM_CLASSES = 7
CLASS_NAMES = ("background", "ground", "marking", "curb", "pole", "tree", "facade")

_EPS = 1e-9


@dataclass(frozen=True)
class SceneSpec:
    """Analytic description of one street scene (all arrays float64).

    ``poles``:    (N, 4)  x, y, radius, height
    ``trees``:    (N, 5)  x, y, trunk_radius, height, crown_radius
    ``facades``:  (N, 4)  x0, x1, y, height          (walls parallel to x)
    ``markings``: (N, 5)  cx, cy, half_len, half_wid, angle (painted rects)
    ``curbs``:    (N, 4)  x0, x1, y, half_width      (stripes parallel to x)
    """

    seed: int
    extent: tuple[float, float]
    road_center_y: float
    road_half_width: float
    poles: np.ndarray
    trees: np.ndarray
    facades: np.ndarray
    markings: np.ndarray
    curbs: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "poles": self.poles,
            "trees": self.trees,
            "facades": self.facades,
            "markings": self.markings,
            "curbs": self.curbs,
        }


@dataclass(frozen=True)
class GroundObservation:
    """One rendered ground-level view.

    ``labels`` is the (H, W) integer class image, ``depth`` the Euclidean
    ray length to the first hit (+inf for sky), and ``appearance`` the float
    class embedding actually consumed by encoders: row ``labels[v, u]`` of the
    epoch's appearance-code matrix.
    """

    camera: Camera
    labels: np.ndarray
    depth: np.ndarray
    epoch: int
    appearance: np.ndarray


@dataclass(frozen=True)
class OverheadRaster:
    """Top-down class raster aligned with a map grid at resolution ``gsd``."""

    grid: MapGrid
    labels: np.ndarray
    gsd: float


@dataclass(frozen=True)
class Reference:
    """Pre-rendered mapping pass over a scene: posed views + overhead tile."""

    views: tuple[GroundObservation, ...]
    overhead: OverheadRaster
    grid: MapGrid
    epoch: int


@dataclass(frozen=True)
class Episode:
    """One localization problem: a reference map area and a query view.

    ``gt_pose`` maps query-sensor coordinates (origin at the query camera's
    ground position, x along its heading) into the world frame the reference
    grid lives in.
    """

    scene_seed: int
    reference: Reference
    query_view: GroundObservation
    gt_pose: PoseSE2
    difficulty: str

    @property
    def grid(self) -> MapGrid:
        return self.reference.grid


def appearance_codes(seed: int, epoch: int, num_classes: int, jitter: float) -> np.ndarray:
    """Per-epoch class embedding matrix: identity plus scaled Gaussian noise."""
    gen = seeding.rng(seed, seeding.APPEARANCE, epoch)
    noise = gen.normal(0.0, 1.0, size=(num_classes, num_classes))
    return (np.eye(num_classes) + jitter * noise).astype(np.float64)


def _forced_poisson(gen: np.random.Generator, mean: float) -> int:
    """Poisson draw, bumped to 1 so enabled classes are never empty."""
    if mean <= 0:
        return 0
    return max(1, int(gen.poisson(mean)))


def generate_scene(config: Config, seed: int) -> SceneSpec:
    """Sample a scene. Identical (config, seed) gives identical bytes.

    Each object family draws from its own seed stream ``(seed, SCENE, k)``
    with the count drawn first, so tests can replay any family independently.
    """
    w = config.world
    lx, ly = w.extent
    if min(lx, ly) < 4 * config.grid.cell_size:
        raise ValueError(
            f"scene extent {w.extent} smaller than 4 grid cells "
            f"({4 * config.grid.cell_size} m)"
        )
    if w.num_classes != NUM_CLASSES:
        raise ValueError(f"world.num_classes must be {NUM_CLASSES}")
    area = lx * ly
    road_y = ly / 2.0
    hw = w.road_half_width

    # poles: stream 0
    gen = seeding.rng(seed, seeding.SCENE, 0)
    n = _forced_poisson(gen, w.pole_density * area)
    side = gen.integers(0, 2, size=n) * 2 - 1
    px = gen.uniform(1.0, lx - 1.0, size=n)
    py = road_y + side * gen.uniform(hw + 0.3, hw + 3.0, size=n)
    poles = np.stack(
        [px, py, gen.uniform(0.08, 0.2, size=n), gen.uniform(3.0, 8.0, size=n)], axis=1
    )

    # trees: stream 1
    gen = seeding.rng(seed, seeding.SCENE, 1)
    n = _forced_poisson(gen, w.tree_density * area)
    side = gen.integers(0, 2, size=n) * 2 - 1
    tx = gen.uniform(1.0, lx - 1.0, size=n)
    ty = road_y + side * gen.uniform(hw + 0.8, hw + 3.5, size=n)
    trees = np.stack(
        [
            tx,
            ty,
            gen.uniform(0.15, 0.3, size=n),
            gen.uniform(4.0, 9.0, size=n),
            gen.uniform(1.2, 2.8, size=n),
        ],
        axis=1,
    )

    # facades: stream 2 — wall runs along both street sides
    gen = seeding.rng(seed, seeding.SCENE, 2)
    segments = []
    for side in (-1.0, 1.0):
        cursor = float(gen.uniform(0.0, 3.0))
        while cursor < lx - 4.0:
            length = float(gen.uniform(8.0, 16.0))
            end = min(cursor + length, lx)
            place = gen.uniform() < w.facade_fill
            y = road_y + side * (hw + float(gen.uniform(2.0, 3.5)))
            height = float(gen.uniform(4.0, 10.0))
            if place:
                segments.append((cursor, end, y, height))
            cursor = end + float(gen.uniform(1.0, 4.0))
    facades = (
        np.array(segments, dtype=np.float64) if segments else np.zeros((0, 4))
    )

    # markings: stream 3 — centre dashes (deterministic) + random patches
    gen = seeding.rng(seed, seeding.SCENE, 3)
    rects = [
        (cx, road_y, 1.0, 0.075, 0.0) for cx in np.arange(2.0, lx - 1.0, 4.0)
    ]
    n = _forced_poisson(gen, w.marking_density * (lx * 2 * hw))
    mx = gen.uniform(1.0, lx - 1.0, size=n)
    my = road_y + gen.uniform(-(hw - 0.5), hw - 0.5, size=n)
    for k in range(n):
        rects.append(
            (
                mx[k],
                my[k],
                float(gen.uniform(0.25, 1.5)),
                float(gen.uniform(0.15, 1.2)),
                float(gen.uniform(-math.pi / 8, math.pi / 8)),
            )
        )
    markings = np.array(rects, dtype=np.float64)

    curbs = np.array(
        [[0.0, lx, road_y - hw, 0.12], [0.0, lx, road_y + hw, 0.12]],
        dtype=np.float64,
    )

    return SceneSpec(
        seed=seed,
        extent=(float(lx), float(ly)),
        road_center_y=float(road_y),
        road_half_width=float(hw),
        poles=poles,
        trees=trees,
        facades=facades,
        markings=markings,
        curbs=curbs,
    )


# ------------------------------------------------------------------ rendering


def _in_rect(px, py, rect) -> np.ndarray:
    """Point-in-oriented-rectangle test for (cx, cy, half_len, half_wid, ang)."""
    cx, cy, hl, hwid, ang = rect
    c, s = math.cos(ang), math.sin(ang)
    dx, dy = px - cx, py - cy
    lon = c * dx + s * dy
    lat = -s * dx + c * dy
    return (np.abs(lon) <= hl) & (np.abs(lat) <= hwid)


def _cylinder_hits(o, d, cx, cy, r, z0, z1):
    """Smallest positive ray parameter hitting a finite open cylinder, else inf."""
    ox, oy, dx, dy = o[:, 0], o[:, 1], d[:, 0], d[:, 1]
    a = dx * dx + dy * dy
    b = 2 * (dx * (ox - cx) + dy * (oy - cy))
    c = (ox - cx) ** 2 + (oy - cy) ** 2 - r * r
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (a > _EPS)
    sq = np.sqrt(np.maximum(disc, 0.0))
    t = np.full(len(o), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        for root in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)):
            z = o[:, 2] + root * d[:, 2]
            valid = ok & (root > _EPS) & (z >= z0) & (z <= z1)
            t = np.where(valid & (root < t), root, t)
    return t


def _sphere_hits(o, d, center, r):
    oc = o - center
    b = 2 * np.einsum("ij,ij->i", d, oc)
    c = np.einsum("ij,ij->i", oc, oc) - r * r
    disc = b * b - 4 * c  # |d| = 1
    ok = disc >= 0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t = np.full(len(o), np.inf)
    for root in ((-b - sq) / 2, (-b + sq) / 2):
        valid = ok & (root > _EPS)
        t = np.where(valid & (root < t), root, t)
    return t


def render_ground(scene: SceneSpec, camera: Camera, epoch: int, jitter: float = 0.3):
    """Ray-cast a posed camera against the scene at a given appearance epoch."""
    if not camera.pose.gravity_aligned:
        raise ValueError("render_ground needs a gravity-aligned camera")
    if camera.pose.t[2] <= 0:
        raise ValueError("camera must be above the ground plane")
    h, w = camera.size
    pix = camera.pixel_grid().reshape(-1, 2)
    d = camera.pixel_rays(pix).reshape(-1, 3)
    o = np.broadcast_to(camera.pose.t, d.shape).astype(np.float64)

    t_best = np.full(len(d), np.inf)
    labels = np.full(len(d), BACKGROUND, dtype=np.int64)

    # ground plane with painted decals (curb wins over marking wins over ground)
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = -o[:, 2] / d[:, 2]
    ground_ok = (d[:, 2] < -_EPS) & (tg > _EPS)
    gx = o[:, 0] + tg * d[:, 0]
    gy = o[:, 1] + tg * d[:, 1]
    glab = np.full(len(d), GROUND, dtype=np.int64)
    for rect in scene.markings:
        glab = np.where(_in_rect(gx, gy, rect), MARKING, glab)
    for x0, x1, yc, chw in scene.curbs:
        on = (gx >= x0) & (gx <= x1) & (np.abs(gy - yc) <= chw)
        glab = np.where(on, CURB, glab)
    update = ground_ok & (tg < t_best)
    t_best = np.where(update, tg, t_best)
    labels = np.where(update, glab, labels)

    def hit(t, label):
        nonlocal t_best, labels
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        labels = np.where(closer, label, labels)

    for x, y, r, height in scene.poles:
        hit(_cylinder_hits(o, d, x, y, r, 0.0, height), POLE)
    for x, y, r, height, crown in scene.trees:
        hit(_cylinder_hits(o, d, x, y, r, 0.0, height), TREE)
        hit(_sphere_hits(o, d, np.array([x, y, height]), crown), TREE)
    for x0, x1, yf, height in scene.facades:
        with np.errstate(divide="ignore", invalid="ignore"):
            tf = (yf - o[:, 1]) / d[:, 1]
        fx = o[:, 0] + tf * d[:, 0]
        fz = o[:, 2] + tf * d[:, 2]
        good = (
            (np.abs(d[:, 1]) > _EPS)
            & (tf > _EPS)
            & (fx >= x0)
            & (fx <= x1)
            & (fz >= 0.0)
            & (fz <= height)
        )
        hit(np.where(good, tf, np.inf), FACADE)

    labels = labels.reshape(h, w)
    depth = t_best.reshape(h, w)
    codes = appearance_codes(scene.seed, epoch, NUM_CLASSES, jitter)
    appearance = codes[labels].astype(np.float32)
    return GroundObservation(
        camera=camera,
        labels=labels,
        depth=depth,
        epoch=int(epoch),
        appearance=appearance,
    )


def render_overhead(scene: SceneSpec, grid: MapGrid, gsd: float) -> OverheadRaster:
    """Argmax-height top-down raster over the grid's footprint.

    Thin structures (poles, curbs, walls) are widened to at least ~3/4 of a
    pixel so they register at aerial resolution; ties go to the higher class
    id (object classes beat ground paint beats bare ground).
    """
    if gsd <= 0:
        raise ValueError("gsd must be positive")
    ex, ey = grid.extent
    ri = max(1, round(ex / gsd))
    rj = max(1, round(ey / gsd))
    rgrid = MapGrid(grid.origin, gsd, (ri, rj))
    pts = rgrid.cell_centers()
    px, py = pts[:, 0], pts[:, 1]
    n = len(pts)
    eff = 0.75 * gsd

    height = np.zeros(n)
    labels = np.full(n, GROUND, dtype=np.int64)

    def paint(mask, h, label):
        nonlocal height, labels
        take = mask & (h >= height)
        height = np.where(take, h, height)
        labels = np.where(take, label, labels)

    for rect in scene.markings:
        paint(_in_rect(px, py, rect), np.full(n, 0.01), MARKING)
    for x0, x1, yc, chw in scene.curbs:
        on = (px >= x0) & (px <= x1) & (np.abs(py - yc) <= max(chw, eff / 2))
        paint(on, np.full(n, 0.02), CURB)
    for x, y, r, hgt in scene.poles:
        on = (px - x) ** 2 + (py - y) ** 2 <= max(r, eff) ** 2
        paint(on, np.full(n, hgt), POLE)
    for x, y, r, hgt, crown in scene.trees:
        on = (px - x) ** 2 + (py - y) ** 2 <= max(crown, eff) ** 2
        paint(on, np.full(n, hgt + crown), TREE)
    for x0, x1, yf, hgt in scene.facades:
        on = (px >= x0) & (px <= x1) & (np.abs(py - yf) <= eff / 2 + 0.05)
        paint(on, np.full(n, hgt), FACADE)

    return OverheadRaster(grid=rgrid, labels=labels.reshape(ri, rj), gsd=float(gsd))


def contains_point(scene: SceneSpec, label: int, points: np.ndarray, tol: float):
    """True where a 3-D point lies on/in an object of the given class (±tol)."""
    pts = np.atleast_2d(points)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    out = np.zeros(len(pts), dtype=bool)
    if label == GROUND:
        return np.abs(z) <= tol
    if label == MARKING:
        for rect in scene.markings:
            out |= _in_rect(x, y, (rect[0], rect[1], rect[2] + tol, rect[3] + tol, rect[4]))
        return out & (np.abs(z) <= tol)
    if label == CURB:
        for x0, x1, yc, chw in scene.curbs:
            out |= (x >= x0 - tol) & (x <= x1 + tol) & (np.abs(y - yc) <= chw + tol)
        return out & (np.abs(z) <= tol)
    if label == POLE:
        for cx, cy, r, h in scene.poles:
            on_wall = np.abs(np.hypot(x - cx, y - cy) - r) <= tol
            out |= on_wall & (z >= -tol) & (z <= h + tol)
        return out
    if label == TREE:
        for cx, cy, r, h, crown in scene.trees:
            on_trunk = (np.abs(np.hypot(x - cx, y - cy) - r) <= tol) & (z >= -tol) & (z <= h + tol)
            on_crown = (
                np.abs(np.linalg.norm(pts - np.array([cx, cy, h]), axis=1) - crown) <= tol
            )
            out |= on_trunk | on_crown
        return out
    if label == FACADE:
        for x0, x1, yf, h in scene.facades:
            out |= (
                (np.abs(y - yf) <= tol)
                & (x >= x0 - tol)
                & (x <= x1 + tol)
                & (z >= -tol)
                & (z <= h + tol)
            )
        return out
    raise ValueError(f"no containment test for class {label}")


# ------------------------------------------------------------------ episodes


def _camera_from_config(config: Config, position, heading: float) -> Camera:
    h, w = config.world.image_size
    fx = (w / 2.0) / math.tan(math.radians(config.world.hfov_deg) / 2.0)
    return Camera.level(
        position, heading, fx, fx, (w - 1) / 2.0, (h - 1) / 2.0, (h, w)
    )


def mapping_cameras(scene: SceneSpec, config: Config, gen: np.random.Generator):
    """Posed mapping cameras along the road corridor."""
    w = config.world
    lx = scene.extent[0]
    xs = np.arange(2.0, lx - 2.0, w.view_spacing)
    jitter = math.radians(w.heading_jitter_deg)
    cams = []
    for x in xs:
        y = scene.road_center_y + float(gen.uniform(-w.lateral_jitter, w.lateral_jitter))
        if w.view_sides == "both":
            headings = (math.pi / 2, -math.pi / 2)
        elif w.view_sides == "forward":
            headings = (0.0,)
        else:
            raise ValueError(f"unknown view_sides {w.view_sides!r}")
        for base in headings:
            heading = base + float(gen.uniform(-jitter, jitter))
            cams.append(
                _camera_from_config(config, (x, y, w.camera_height), heading)
            )
    return cams


def reference_grid(scene: SceneSpec, config: Config) -> MapGrid:
    """Road-aligned reference grid centred on the scene's corridor."""
    ex, ey = config.grid.map_extent
    d = config.grid.cell_size
    shape = (max(4, round(ex / d)), max(4, round(ey / d)))
    corner = np.array(
        [scene.extent[0] / 2.0 - shape[0] * d / 2.0, scene.road_center_y - shape[1] * d / 2.0]
    )
    return MapGrid(PoseSE2(0.0, corner), d, shape)


def prepare_reference(scene: SceneSpec, config: Config, gen: np.random.Generator) -> Reference:
    """Render the mapping pass: covering mapping views plus the overhead raster.

    Rig stops whose frustum misses the reference grid are dropped: a blind
    view adds nothing to the map, and as a difficulty anchor it would seed
    episodes that cannot be localized even in principle. The kept views all
    clear the same overlap bound that query poses must satisfy.
    """
    epoch = int(gen.integers(0, 1_000_000))
    cams = mapping_cameras(scene, config, gen)
    grid = reference_grid(scene, config)
    cams = [
        cam
        for cam in cams
        if frustum_overlap(cam, grid, config.grid.query_depth)
        >= config.evaluation.min_frustum_overlap
    ]
    if not cams:
        raise ValueError(
            "no mapping view overlaps the reference grid; "
            "check world extent against map extent and view spacing"
        )
    views = tuple(
        render_ground(scene, cam, epoch, config.world.appearance_jitter) for cam in cams
    )
    overhead = render_overhead(scene, grid, config.grid.overhead_gsd)
    return Reference(views=views, overhead=overhead, grid=grid, epoch=epoch)


def view_se2(camera: Camera) -> PoseSE2:
    """Ground-plane pose of a camera: position xy, heading."""
    return PoseSE2(camera.heading, camera.pose.t[:2])


def nearest_view_offset(episode_views, query_pose: PoseSE2) -> tuple[float, float]:
    """(distance, |heading difference|) to the nearest mapping view.

    Views at indistinguishable distances (co-located left/right cameras of one
    frame) tie-break on the smaller heading difference.
    """
    offsets = []
    for view in episode_views:
        p = view_se2(view.camera)
        dist = float(np.linalg.norm(p.t - query_pose.t))
        dang = abs(float(wrap_angle(query_pose.angle - p.angle)))
        offsets.append((dist, dang))
    dmin = min(d for d, _ in offsets)
    dang = min(a for d, a in offsets if d <= dmin + 1e-9)
    return dmin, dang


def _triangle_points(tri: np.ndarray, per_side: int = 12) -> np.ndarray:
    """Deterministic barycentric lattice of points inside a triangle."""
    pts = []
    for a in range(per_side + 1):
        for b in range(per_side + 1 - a):
            c = per_side - a - b
            pts.append((a * tri[0] + b * tri[1] + c * tri[2]) / per_side)
    return np.array(pts)


def frustum_overlap(camera: Camera, grid: MapGrid, max_depth: float) -> float:
    """Fraction of the camera's ground frustum falling inside the grid."""
    tri = frustum_polygon(camera, max_depth)
    pts = _triangle_points(tri)
    i, j = grid.world_to_cell(pts)
    return float(np.mean(grid.contains_cell(i, j)))


def sample_episode(
    scene: SceneSpec,
    config: Config,
    rng: np.random.Generator,
    difficulty: str = "any",
    reference: Reference | None = None,
    max_tries: int = 2000,
) -> Episode:
    """Draw one localization episode at the requested difficulty.

    ``difficulty``: "easy" (offset < 10 m and < 45 deg from the nearest
    mapping view), "hard" (> 10 m and > 60 deg), "any", or "zero" (query pose
    exactly at a mapping view; appearance epoch still differs).
    """
    ev = config.evaluation
    if reference is None:
        reference = prepare_reference(scene, config, rng)

    # query epoch differs from the mapping epoch so appearance never matches
    epoch = int(rng.integers(0, 1_000_000))
    if epoch == reference.epoch:
        epoch += 1

    anchors = [view_se2(v.camera) for v in reference.views]
    cam_h = config.world.camera_height

    if difficulty == "zero":
        idx = int(rng.integers(0, len(anchors)))
        pose = anchors[idx]
        cam = _camera_from_config(config, (pose.t[0], pose.t[1], cam_h), pose.angle)
        query = render_ground(scene, cam, epoch, config.world.appearance_jitter)
        return Episode(scene.seed, reference, query, pose, difficulty)

    for _ in range(max_tries):
        anchor = anchors[int(rng.integers(0, len(anchors)))]
        if difficulty == "easy":
            radius = float(rng.uniform(0.0, ev.easy_max_dist - 0.5))
            dtheta = math.radians(float(rng.uniform(0.0, ev.easy_max_angle_deg - 1.0)))
        elif difficulty == "hard":
            radius = float(rng.uniform(ev.hard_min_dist + 0.5, ev.hard_min_dist + 6.0))
            dtheta = math.radians(
                float(rng.uniform(ev.hard_min_angle_deg + 1.0, 180.0))
            )
        elif difficulty == "any":
            radius = float(rng.uniform(0.0, ev.hard_min_dist + 6.0))
            dtheta = math.radians(float(rng.uniform(0.0, 180.0)))
        else:
            raise ValueError(f"unknown difficulty {difficulty!r}")
        bearing = float(rng.uniform(-math.pi, math.pi))
        sign = 1.0 if rng.uniform() < 0.5 else -1.0
        pos = anchor.t + radius * np.array([math.cos(bearing), math.sin(bearing)])
        heading = float(wrap_angle(anchor.angle + sign * dtheta))
        pose = PoseSE2(heading, pos)

        dist, dang = nearest_view_offset(reference.views, pose)
        dang_deg = math.degrees(dang)
        if difficulty == "easy" and not (
            dist < ev.easy_max_dist and dang_deg < ev.easy_max_angle_deg
        ):
            continue
        if difficulty == "hard" and not (
            dist > ev.hard_min_dist and dang_deg > ev.hard_min_angle_deg
        ):
            continue
        cam = _camera_from_config(config, (pos[0], pos[1], cam_h), heading)
        if frustum_overlap(cam, reference.grid, config.grid.query_depth) < ev.min_frustum_overlap:
            continue
        query = render_ground(scene, cam, epoch, config.world.appearance_jitter)
        return Episode(scene.seed, reference, query, pose, difficulty)

    raise RuntimeError(
        f"failed to sample a {difficulty!r} episode in {max_tries} tries; "
        "check world extent vs difficulty bounds"
    )
