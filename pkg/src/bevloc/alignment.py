"""SE(2) map alignment: featuremetric scoring and sampling-based solving.

Neural maps are projected to unit-norm "matching" features; a pose is scored
by warping every valid query cell into the reference map, sampling it
bilinearly, and averaging the positive part of the feature dot products.
Candidate poses come from correspondence pairs sampled proportionally to a
softmax over feature similarities, solved in closed form (2-point SE(2)
Kabsch), scored, and the best pose is polished by an exhaustive local grid
search. Gradients flow through scoring only, never through sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .config import Config, RansacConfig, RefineConfig
from .geometry import Camera, MapGrid, NeuralMap, PoseSE2, grid_sample_2d
from .ground_encoder import encode_ground, encoder_param_spec
from .map_fusion import fuse
from .overhead_encoder import encode_overhead, overhead_param_spec
from .params import ParamVector, SliceSpec, init_params
from .synthworld import GroundObservation, Reference


class AlignmentError(RuntimeError):
    """Raised when alignment cannot produce a pose (no usable hypotheses)."""


@dataclass
class MatchingMap:
    """Unit-norm matching features on a grid; invalid cells hold zeros."""

    grid: MapGrid
    features: torch.Tensor  # (I, J, Fm)
    valid: torch.Tensor  # (I, J) bool


def matching_param_spec(
    feature_dim: int, matching_dim: int, prefix: str = "match."
) -> list[SliceSpec]:
    return [(prefix + "w", (matching_dim, feature_dim))]


def init_matching_params(
    feature_dim: int,
    matching_dim: int,
    rng: np.random.Generator,
    dtype: torch.dtype = torch.float32,
) -> ParamVector:
    return init_params(matching_param_spec(feature_dim, matching_dim), rng, dtype)


def project_matching(
    params: ParamVector, nmap: NeuralMap, prefix: str = "match."
) -> MatchingMap:
    """Linear projection + L2 normalization.

    The projection has no bias, so scaling the input features by any positive
    constant cancels in the normalization; cells whose projection has zero
    norm are marked invalid.
    """
    w = params[prefix + "w"]
    proj = nmap.features.to(w.dtype) @ w.T
    norm = proj.norm(dim=-1)
    valid = nmap.valid & (norm > 0)
    unit = proj / norm.clamp_min(1e-30).unsqueeze(-1)
    unit = torch.where(valid.unsqueeze(-1), unit, torch.zeros_like(unit))
    return MatchingMap(grid=nmap.grid, features=unit, valid=valid)


# ------------------------------------------------------------------ scoring


def _valid_cells(m: MatchingMap):
    """Flat indices and features of valid cells."""
    idx = torch.nonzero(m.valid.reshape(-1), as_tuple=False).squeeze(-1)
    feats = m.features.reshape(-1, m.features.shape[-1])[idx]
    return idx, feats


def score_poses(
    poses: torch.Tensor,
    query: MatchingMap,
    reference: MatchingMap,
    chunk: int = 1024,
) -> torch.Tensor:
    """Featuremetric score for a batch of poses ``(B, 3)`` as ``(theta, tx, ty)``.

    Score = mean over valid query cells of ``max(0, <q, ref(warp(pose, c))>)``;
    reference lookups outside the map clamp to the border value. Differentiable
    in the pose parameters and in both maps. Scores lie in [0, 1].
    """
    if poses.ndim != 2 or poses.shape[-1] != 3:
        raise ValueError("poses must have shape (B, 3)")
    idx, qf = _valid_cells(query)
    if idx.shape[0] == 0:
        raise AlignmentError("query map has no valid cells")
    centers = torch.as_tensor(query.grid.cell_centers(), dtype=poses.dtype)[idx]
    out = []
    for start in range(0, poses.shape[0], chunk):
        p = poses[start : start + chunk]
        c, s = torch.cos(p[:, 0]), torch.sin(p[:, 0])
        x = centers[:, 0].unsqueeze(0)
        y = centers[:, 1].unsqueeze(0)
        wx = c.unsqueeze(1) * x - s.unsqueeze(1) * y + p[:, 1].unsqueeze(1)
        wy = s.unsqueeze(1) * x + c.unsqueeze(1) * y + p[:, 2].unsqueeze(1)
        u, v = reference.grid.world_to_grid(torch.stack([wx, wy], dim=-1))
        ref = grid_sample_2d(reference.features, u, v)  # (b, M, Fm)
        dots = (ref * qf.to(ref.dtype).unsqueeze(0)).sum(-1)
        out.append(dots.clamp_min(0.0).mean(dim=1))
    return torch.cat(out)


def score_pose(pose: PoseSE2, query: MatchingMap, reference: MatchingMap) -> torch.Tensor:
    """Differentiable featuremetric score of one pose (0-dim tensor)."""
    p = torch.tensor(
        [[pose.angle, pose.t[0], pose.t[1]]], dtype=query.features.dtype
    )
    return score_poses(p, query, reference)[0]


# ------------------------------------------------------------------- kabsch


def kabsch_points(src: np.ndarray, dst: np.ndarray) -> PoseSE2 | None:
    """Least-squares SE(2) transform taking ``src`` points onto ``dst``.

    Returns None when the configuration carries no rotation information (all
    points coincident on either side, or perfectly ambiguous).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[0] < 2:
        raise ValueError("need matching (N>=2, 2) point arrays")
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    s = src - cs
    d = dst - cd
    dot = float((s * d).sum())
    cross = float((s[:, 0] * d[:, 1] - s[:, 1] * d[:, 0]).sum())
    scale = np.abs(s).sum() + np.abs(d).sum() + 1e-30
    if math.hypot(dot, cross) < 1e-12 * scale:
        return None
    angle = math.atan2(cross, dot)
    c, sn = math.cos(angle), math.sin(angle)
    t = cd - np.array([c * cs[0] - sn * cs[1], sn * cs[0] + c * cs[1]])
    return PoseSE2(angle, t)


def kabsch_se2(
    corr_a: "Correspondence",
    corr_b: "Correspondence",
    query_grid: MapGrid,
    reference_grid: MapGrid,
) -> PoseSE2 | None:
    """Exact rigid 2-D fit from two cell correspondences.

    Degenerate (returns None) when either side's pair of cell centres is
    closer than half that grid's cell size.
    """
    q = np.stack(
        [
            query_grid.cell_center(*corr_a.query_cell),
            query_grid.cell_center(*corr_b.query_cell),
        ]
    )
    r = np.stack(
        [
            reference_grid.cell_center(*corr_a.ref_cell),
            reference_grid.cell_center(*corr_b.ref_cell),
        ]
    )
    if np.linalg.norm(q[1] - q[0]) < 0.5 * query_grid.cell_size:
        return None
    if np.linalg.norm(r[1] - r[0]) < 0.5 * reference_grid.cell_size:
        return None
    return kabsch_points(q, r)


def _kabsch_pairs(q1, q2, r1, r2):
    """Vectorized 2-point closed form: arrays (B, 2) -> (theta, tx, ty) (B, 3)."""
    dq = q2 - q1
    dr = r2 - r1
    dot = dq[:, 0] * dr[:, 0] + dq[:, 1] * dr[:, 1]
    cross = dq[:, 0] * dr[:, 1] - dq[:, 1] * dr[:, 0]
    theta = np.arctan2(cross, dot)
    c, s = np.cos(theta), np.sin(theta)
    mq = 0.5 * (q1 + q2)
    mr = 0.5 * (r1 + r2)
    tx = mr[:, 0] - (c * mq[:, 0] - s * mq[:, 1])
    ty = mr[:, 1] - (s * mq[:, 0] + c * mq[:, 1])
    return np.stack([theta, tx, ty], axis=1)


# ------------------------------------------------------- correspondences


@dataclass(frozen=True)
class Correspondence:
    query_cell: tuple[int, int]
    ref_cell: tuple[int, int]
    similarity: float


def _correspondence_cdf(query: MatchingMap, reference: MatchingMap, temperature: float):
    """CDF of the flat softmax over all (valid query, valid ref) cell pairs.

    Returns ``(qv, rv, cdf)`` with ``qv``/``rv`` the flat valid-cell indices;
    pair ``k`` of the distribution is ``(qv[k // len(rv)], rv[k % len(rv)])``.
    The similarity matrix is processed in row blocks so peak memory stays at
    one float64 array over the pair space.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    with torch.no_grad():
        qidx, qf = _valid_cells(query)
        ridx, rf = _valid_cells(reference)
        if qidx.shape[0] == 0 or ridx.shape[0] == 0:
            raise AlignmentError("no valid cell pairs to draw correspondences from")
        qf64 = qf.to(torch.float64).numpy()
        rf64 = rf.to(torch.float64).numpy()
    nq, nr = len(qf64), len(rf64)
    block = max(1, min(nq, 1 + (1 << 22) // max(nr, 1)))
    gmax = -np.inf
    for a in range(0, nq, block):
        gmax = max(gmax, float((qf64[a : a + block] @ rf64.T).max()))
    cdf = np.empty(nq * nr, dtype=np.float64)
    inv_t = 1.0 / float(temperature)
    for a in range(0, nq, block):
        sims = qf64[a : a + block] @ rf64.T
        cdf[a * nr : (a + len(sims)) * nr] = np.exp((sims.reshape(-1) - gmax) * inv_t)
    np.cumsum(cdf, out=cdf)
    cdf /= cdf[-1]
    return qidx.numpy(), ridx.numpy(), cdf


def _draw_from_cdf(cdf: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling with one vectorized uniform draw (deterministic)."""
    u = rng.random(count)
    return np.searchsorted(cdf, u, side="right").clip(0, len(cdf) - 1)


def sample_correspondences(
    query: MatchingMap,
    reference: MatchingMap,
    count: int,
    temperature: float,
    rng: np.random.Generator,
) -> list[Correspondence]:
    """Draw cell pairs i.i.d. with probability softmax(similarity / T)."""
    if count < 1:
        raise ValueError("count must be >= 1")
    qv, rv, cdf = _correspondence_cdf(query, reference, temperature)
    flat = _draw_from_cdf(cdf, count, rng)
    qi, ri = np.divmod(flat, len(rv))
    qcells = qv[qi]
    rcells = rv[ri]
    qfeat = query.features.reshape(-1, query.features.shape[-1])
    rfeat = reference.features.reshape(-1, reference.features.shape[-1])
    with torch.no_grad():
        sims = (
            (qfeat[qcells].to(torch.float64) * rfeat[rcells].to(torch.float64))
            .sum(-1)
            .numpy()
        )
    jq = query.grid.shape[1]
    jr = reference.grid.shape[1]
    return [
        Correspondence(
            query_cell=(int(qc) // jq, int(qc) % jq),
            ref_cell=(int(rc) // jr, int(rc) % jr),
            similarity=float(sv),
        )
        for qc, rc, sv in zip(qcells, rcells, sims)
    ]


# -------------------------------------------------------------------- ransac


GROUND_TRUTH = "ground_truth"
REFINEMENT = "refinement"


@dataclass
class ScoredPoseSet:
    """Poses with featuremetric scores and where each pose came from.

    ``poses`` is ``(B, 3)`` as ``(theta, tx, ty)``; ``provenance[k]`` is
    ``"ransac:<sample index>"``, ``"ground_truth"`` or ``"refinement"``. An
    empty set flags that every hypothesis was degenerate.
    """

    poses: np.ndarray
    scores: np.ndarray
    provenance: list[str]

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64).reshape(-1, 3)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not (len(self.poses) == len(self.scores) == len(self.provenance)):
            raise ValueError("poses, scores and provenance must align")
        if self.scores.size and not np.isfinite(self.scores).all():
            raise ValueError("scores must be finite")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def empty(self) -> bool:
        return len(self.poses) == 0

    def pose(self, k: int) -> PoseSE2:
        th, tx, ty = self.poses[k]
        return PoseSE2(float(th), np.array([tx, ty]))

    def best(self) -> tuple[PoseSE2, float]:
        """Highest-scoring pose; ties go to the lowest index."""
        if self.empty:
            raise AlignmentError("empty hypothesis set")
        k = int(np.argmax(self.scores))
        return self.pose(k), float(self.scores[k])

    def order_by_score(self) -> np.ndarray:
        """Indices sorted by descending score (stable)."""
        return np.argsort(-self.scores, kind="stable")

    def extended(
        self, poses: np.ndarray, scores: np.ndarray, provenance: list[str]
    ) -> "ScoredPoseSet":
        return ScoredPoseSet(
            poses=np.concatenate([self.poses, np.asarray(poses).reshape(-1, 3)]),
            scores=np.concatenate([self.scores, np.asarray(scores).reshape(-1)]),
            provenance=self.provenance + list(provenance),
        )


def _empty_pose_set() -> ScoredPoseSet:
    return ScoredPoseSet(poses=np.zeros((0, 3)), scores=np.zeros(0), provenance=[])


def ransac_localize(
    query: MatchingMap,
    reference: MatchingMap,
    n_hypotheses: int,
    temperature: float,
    rng: np.random.Generator,
    cfg: RansacConfig,
) -> ScoredPoseSet:
    """Sample, solve, and score pose hypotheses (no gradients).

    For every hypothesis, ``cfg.oversample`` disjoint correspondence pairs are
    drawn and the pair whose query-side/reference-side distances agree best
    (smallest ``|log(dq/dr)|``) is kept; pairs spanning less than half a cell
    on either side are degenerate. All draws come from one vectorized uniform
    block, so the result depends only on the rng state, never on scheduling.
    """
    if n_hypotheses < 1:
        raise ValueError("n_hypotheses must be >= 1")
    try:
        qv, rv, cdf = _correspondence_cdf(query, reference, temperature)
    except AlignmentError:
        return _empty_pose_set()
    flat = _draw_from_cdf(cdf, n_hypotheses * cfg.oversample * 2, rng)
    qi, ri = np.divmod(flat, len(rv))
    qcells = qv[qi]
    rcells = rv[ri]

    jq = query.grid.shape[1]
    jr = reference.grid.shape[1]
    qpts = query.grid.cell_center(qcells // jq, qcells % jq)
    rpts = reference.grid.cell_center(rcells // jr, rcells % jr)

    shape = (n_hypotheses, cfg.oversample, 2)
    qpts = qpts.reshape(*shape, 2)
    rpts = rpts.reshape(*shape, 2)
    dq = np.linalg.norm(qpts[:, :, 1] - qpts[:, :, 0], axis=-1)
    dr = np.linalg.norm(rpts[:, :, 1] - rpts[:, :, 0], axis=-1)
    usable = (dq >= 0.5 * query.grid.cell_size) & (
        dr >= 0.5 * reference.grid.cell_size
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        metric = np.abs(np.log(dq / dr))
    metric = np.where(usable, metric, np.inf)

    pick = np.argmin(metric, axis=1)
    rows = np.arange(n_hypotheses)
    keep = np.isfinite(metric[rows, pick])
    if not keep.any():
        return _empty_pose_set()
    rows = rows[keep]
    pick = pick[keep]
    qp = qpts[rows, pick]
    rp = rpts[rows, pick]
    poses = _kabsch_pairs(qp[:, 0], qp[:, 1], rp[:, 0], rp[:, 1])

    with torch.no_grad():
        scores = score_poses(
            torch.as_tensor(poses, dtype=query.features.dtype),
            query,
            reference,
            chunk=cfg.score_chunk,
        ).numpy()
    return ScoredPoseSet(
        poses=poses,
        scores=scores.astype(np.float64),
        provenance=[f"ransac:{int(k)}" for k in rows],
    )


# ------------------------------------------------------------------- refine


def _refine_offsets(cfg: RefineConfig, dtype: torch.dtype) -> torch.Tensor:
    # integer multiples of the step so the centre offset is exactly zero
    nx = int(round(cfg.window_xy / cfg.step_xy)) + 1
    na = int(round(cfg.window_angle_deg / cfg.step_angle_deg)) + 1
    dx = (torch.arange(nx, dtype=dtype) - (nx - 1) // 2) * cfg.step_xy
    da = (torch.arange(na, dtype=dtype) - (na - 1) // 2) * math.radians(
        cfg.step_angle_deg
    )
    return torch.cartesian_prod(da, dx, dx)  # (n, 3): dtheta, dx, dy


def refine_pose(
    pose: PoseSE2,
    query: MatchingMap,
    reference: MatchingMap,
    cfg: RefineConfig | None = None,
    chunk: int = 1024,
    return_score: bool = False,
):
    """Exhaustive grid refinement around ``pose``.

    Scores every pose in a window of ``window_xy`` metres square by
    ``window_angle_deg`` degrees at the configured steps. The centre pose is
    on the grid (odd counts), so the result never scores below the input.
    Ties are broken toward the smallest displacement, then smallest rotation,
    then scan order.
    """
    if cfg is None:
        cfg = RefineConfig()
    dtype = query.features.dtype
    offs = _refine_offsets(cfg, dtype)
    base = torch.tensor([pose.angle, pose.t[0], pose.t[1]], dtype=dtype)
    cand = base.unsqueeze(0) + offs
    with torch.no_grad():
        scores = score_poses(cand, query, reference, chunk=chunk).numpy()
    tie = np.where(scores == scores.max())[0]
    offs_np = offs.numpy()
    disp = offs_np[tie, 1] ** 2 + offs_np[tie, 2] ** 2
    rot = np.abs(offs_np[tie, 0])
    k = int(tie[np.lexsort((tie, rot, disp))[0]])
    refined = PoseSE2(
        float(cand[k, 0].item()), np.array([cand[k, 1].item(), cand[k, 2].item()])
    )
    if return_score:
        return refined, float(scores[k])
    return refined


# ----------------------------------------------------------------- pipeline


@dataclass
class LocalizeResult:
    pose: PoseSE2
    score: float
    hypotheses: ScoredPoseSet


def query_grid(config: Config) -> MapGrid:
    """Sensor-frame grid ahead of a query camera (x forward, y left)."""
    g = config.grid
    d = g.cell_size
    shape = (max(1, round(g.query_depth / d)), max(1, round(g.query_width / d)))
    origin = PoseSE2(0.0, np.array([0.0, -shape[1] * d / 2.0]))
    return MapGrid(origin, d, shape)


def sensor_frame_view(view: GroundObservation) -> GroundObservation:
    """Re-express a view's camera at the origin of its own sensor frame."""
    cam = view.camera
    local = Camera.level(
        (0.0, 0.0, cam.pose.t[2]), 0.0, cam.fx, cam.fy, cam.cx, cam.cy, cam.size
    )
    return GroundObservation(
        camera=local,
        labels=view.labels,
        depth=view.depth,
        epoch=view.epoch,
        appearance=view.appearance,
    )


def encode_query(
    params: ParamVector,
    view: GroundObservation,
    config: Config,
    variant: str | None = None,
) -> NeuralMap:
    """Single-view query map, built in the camera's own sensor frame."""
    return encode_ground(
        params, [sensor_frame_view(view)], query_grid(config), config.encoder,
        variant=variant,
    )


def encode_reference(
    params: ParamVector,
    reference: Reference,
    config: Config,
    use_ground: bool = True,
    use_overhead: bool = True,
    fuse_mode: str = "max",
    variant: str | None = None,
) -> NeuralMap:
    """Fused multi-modality reference map on the reference grid."""
    maps = []
    if use_ground and reference.views:
        maps.append(
            encode_ground(
                params, list(reference.views), reference.grid, config.encoder,
                variant=variant,
            )
        )
    if use_overhead and reference.overhead is not None:
        maps.append(
            encode_overhead(params, reference.overhead, reference.grid, config.encoder)
        )
    if not maps:
        raise ValueError("reference needs at least one modality")
    return fuse(maps, mode=fuse_mode)


def model_param_spec(config: Config) -> list[SliceSpec]:
    """Layout of the full model: both encoders, matching head, temperature."""
    return (
        encoder_param_spec(config.encoder, config.world.num_classes)
        + overhead_param_spec(config.encoder, config.world.num_classes)
        + matching_param_spec(config.encoder.feature_dim, config.matching.dim)
        + [("log_tau", ())]
    )


def init_model_params(
    config: Config, rng: np.random.Generator, dtype: torch.dtype = torch.float32
) -> ParamVector:
    params = init_params(model_param_spec(config), rng, dtype)
    with torch.no_grad():
        params["log_tau"].fill_(config.training.temperature_init)
    return params


def model_temperature(params: ParamVector) -> float:
    """Learned softmax temperature, or 1 when the model has none."""
    if "log_tau" in params:
        return float(params["log_tau"].detach().exp().item())
    return 1.0


def align_maps(
    query: MatchingMap,
    reference: MatchingMap,
    n_hypotheses: int,
    temperature: float,
    rng: np.random.Generator,
    ransac_cfg: RansacConfig,
    refine_cfg: RefineConfig,
) -> LocalizeResult:
    """Hypothesis search plus refinement between two matching maps.

    Raises :class:`AlignmentError` when every hypothesis is degenerate.
    """
    hyps = ransac_localize(query, reference, n_hypotheses, temperature, rng, ransac_cfg)
    if hyps.empty:
        raise AlignmentError("all pose hypotheses were degenerate")
    coarse, _ = hyps.best()
    pose, score = refine_pose(
        coarse, query, reference, refine_cfg, chunk=ransac_cfg.score_chunk,
        return_score=True,
    )
    hyps = hyps.extended(
        np.array([[pose.angle, pose.t[0], pose.t[1]]]),
        np.array([score]),
        [REFINEMENT],
    )
    return LocalizeResult(pose=pose, score=score, hypotheses=hyps)


def localize(
    params: ParamVector,
    query_view: GroundObservation,
    reference: Reference,
    config: Config,
    rng: np.random.Generator,
    n_hypotheses: int | None = None,
    use_ground: bool = True,
    use_overhead: bool = True,
    fuse_mode: str = "max",
    variant: str | None = None,
) -> LocalizeResult:
    """Full localization: encode both sides, sample hypotheses, refine.

    The returned pose maps query sensor coordinates into the reference world
    frame, i.e. it estimates the query camera's planar pose. Raises
    :class:`AlignmentError` when every hypothesis is degenerate.
    """
    if n_hypotheses is None:
        n_hypotheses = config.ransac.eval_hypotheses
    with torch.no_grad():
        qmap = project_matching(
            params, encode_query(params, query_view, config, variant=variant)
        )
        rmap = project_matching(
            params,
            encode_reference(
                params, reference, config,
                use_ground=use_ground, use_overhead=use_overhead,
                fuse_mode=fuse_mode, variant=variant,
            ),
        )
    return align_maps(
        qmap,
        rmap,
        n_hypotheses,
        model_temperature(params),
        rng,
        config.ransac,
        config.refine,
    )
