"""Experiment layer: metrics, episode pools, ablations, probe, exports.

Everything is deterministic given (config, seed). Episode evaluation gives
every episode its own generator derived from (seed, stream, index), so
results do not depend on evaluation order or worker count; aggregation is an
order-independent merge sorted by episode index.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import seeding
from .alignment import (
    AlignmentError,
    MatchingMap,
    align_maps,
    encode_query,
    encode_reference,
    model_temperature,
    project_matching,
)
from .config import Config, EvalConfig
from .geometry import MapGrid, NeuralMap, PoseSE2, wrap_angle
from .learning import TrainState, init_train_state, train_step
from .params import ParamVector, init_params
from .synthworld import (
    CLASS_NAMES,
    CURB,
    FACADE,
    GROUND,
    MARKING,
    POLE,
    TREE,
    Episode,
    Reference,
    SceneSpec,
    generate_scene,
    nearest_view_offset,
    prepare_reference,
    sample_episode,
    render_overhead,
)

AUC_STEP = 0.1  # metres between recall-curve samples when integrating


# ---------------------------------------------------------------- results


@dataclass(frozen=True)
class LocalizationResult:
    """Outcome of one episode: predicted pose against the ground truth.

    ``pose`` is None when every hypothesis was degenerate (no overlap); the
    errors are then infinite and the episode counts as a miss everywhere.
    ``difficulty`` is re-derived from the query's offset to the nearest
    mapping view, never trusted from the episode label.
    """

    episode: int
    pose: PoseSE2 | None
    gt_pose: PoseSE2
    error_m: float
    error_deg: float
    difficulty: str
    score: float

    def __post_init__(self):
        if self.error_m < 0 or self.error_deg < 0:
            raise ValueError("pose errors must be nonnegative")


def pose_errors(pose: PoseSE2, gt_pose: PoseSE2) -> tuple[float, float]:
    """(metres, degrees) between two SE(2) poses."""
    dt = float(np.linalg.norm(np.asarray(pose.t) - np.asarray(gt_pose.t)))
    da = abs(math.degrees(wrap_angle(pose.angle - gt_pose.angle)))
    return dt, da


def difficulty_tag(dist_m: float, angle_deg: float, cfg: EvalConfig) -> str:
    """Split from the query's offset to its nearest mapping view.

    A pure function partitioning every offset into exactly one of
    easy / medium / hard.
    """
    if dist_m < cfg.easy_max_dist and angle_deg < cfg.easy_max_angle_deg:
        return "easy"
    if dist_m > cfg.hard_min_dist and angle_deg > cfg.hard_min_angle_deg:
        return "hard"
    return "medium"


def episode_difficulty(episode: Episode, cfg: EvalConfig) -> str:
    dist, dang = nearest_view_offset(episode.reference.views, episode.gt_pose)
    return difficulty_tag(dist, math.degrees(dang), cfg)


# ----------------------------------------------------------------- metrics


def recall(results: list[LocalizationResult], eps_m: float, eps_deg: float) -> float:
    """Fraction of results with both errors within the threshold pair."""
    if not results:
        raise ValueError("recall needs at least one result")
    hits = sum(1 for r in results if r.error_m <= eps_m and r.error_deg <= eps_deg)
    return hits / len(results)


def recall_curve(
    results: list[LocalizationResult],
    eps_deg: float,
    max_m: float,
    step: float = AUC_STEP,
) -> tuple[np.ndarray, np.ndarray]:
    """Recall against position error, with the angular threshold as a gate.

    Sampled every ``step`` metres from zero, always ending exactly at
    ``max_m`` (the last interval may be shorter), so integrals over the
    curve never overshoot the requested range.
    """
    if not results:
        raise ValueError("recall_curve needs at least one result")
    n = int(math.floor(max_m / step + 1e-9))
    ts = step * np.arange(n + 1)
    if max_m - ts[-1] > 1e-9 * max(max_m, 1.0):
        ts = np.append(ts, max_m)
    errs = np.array([r.error_m for r in results])
    gated = np.array([r.error_deg <= eps_deg for r in results])
    rec = np.array([np.mean(gated & (errs <= t)) for t in ts])
    return ts, rec


def recall_auc_value(
    results: list[LocalizationResult], eps_m: float, eps_deg: float
) -> float:
    """Normalized area under the gated recall curve up to ``eps_m``.

    Trapezoid integration at 0.1 m resolution, divided by ``eps_m`` so a
    method that is always within threshold scores exactly 1.
    """
    ts, rec = recall_curve(results, eps_deg, eps_m)
    return float(np.trapezoid(rec, ts) / eps_m)


@dataclass(frozen=True)
class MetricRow:
    """One split's metrics over a common list of threshold pairs."""

    split: str
    count: int
    recall: tuple[float, ...]
    auc: tuple[float, ...]


def recall_auc(
    results: list[LocalizationResult],
    thresholds: tuple[tuple[float, float], ...],
) -> list[MetricRow]:
    """Recall and AUC per threshold pair: one overall row, one per split."""
    if not results:
        raise ValueError("recall_auc needs at least one result")
    rows = []
    groups = [("overall", results)]
    for split in ("easy", "medium", "hard"):
        sub = [r for r in results if r.difficulty == split]
        if sub:
            groups.append((split, sub))
    for name, sub in groups:
        rows.append(
            MetricRow(
                split=name,
                count=len(sub),
                recall=tuple(recall(sub, em, ed) for em, ed in thresholds),
                auc=tuple(recall_auc_value(sub, em, ed) for em, ed in thresholds),
            )
        )
    return rows


def render_metric_table(
    rows: list[MetricRow], thresholds: tuple[tuple[float, float], ...]
) -> str:
    """Tab-separated table; recall and AUC rendered as percentages."""
    head = ["split", "count"]
    for em, ed in thresholds:
        head += [f"recall@{em:g}m/{ed:g}deg", f"auc@{em:g}m/{ed:g}deg"]
    lines = ["\t".join(head)]
    for row in rows:
        cells = [row.split, str(row.count)]
        for rec, auc in zip(row.recall, row.auc):
            cells += [f"{100 * rec:.1f}", f"{100 * auc:.1f}"]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------- evaluation


def _reference_matching_map(
    params: ParamVector,
    reference: Reference,
    config: Config,
    use_ground: bool,
    use_overhead: bool,
    fuse_mode: str,
    variant: str | None,
) -> MatchingMap:
    with torch.no_grad():
        return project_matching(
            params,
            encode_reference(
                params, reference, config,
                use_ground=use_ground, use_overhead=use_overhead,
                fuse_mode=fuse_mode, variant=variant,
            ),
        )


def evaluate_episodes(
    params: ParamVector,
    episodes: list[Episode],
    config: Config,
    seed: int,
    n_hypotheses: int | None = None,
    threads: int = 1,
    use_ground: bool = True,
    use_overhead: bool = True,
    fuse_mode: str = "max",
    variant: str | None = None,
) -> list[LocalizationResult]:
    """Localize every episode; order- and thread-count-independent.

    Episode ``k`` always draws from the generator ``(seed, RANSAC, k)``, and
    encoded reference maps are cached per reference object, so the result
    list is a pure function of (params, episodes, config, seed).
    """
    if n_hypotheses is None:
        n_hypotheses = config.ransac.eval_hypotheses
    temperature = model_temperature(params)
    cache: dict[int, MatchingMap] = {}
    lock = threading.Lock()

    def reference_map(reference: Reference) -> MatchingMap:
        key = id(reference)
        with lock:
            if key in cache:
                return cache[key]
        built = _reference_matching_map(
            params, reference, config, use_ground, use_overhead, fuse_mode, variant
        )
        with lock:
            return cache.setdefault(key, built)

    def run(item: tuple[int, Episode]) -> LocalizationResult:
        idx, episode = item
        rng = seeding.rng(seed, seeding.RANSAC, idx)
        with torch.no_grad():
            qmap = project_matching(
                params, encode_query(params, episode.query_view, config, variant=variant)
            )
        rmap = reference_map(episode.reference)
        try:
            found = align_maps(
                qmap, rmap, n_hypotheses, temperature, rng,
                config.ransac, config.refine,
            )
            pose, score = found.pose, found.score
            err_m, err_deg = pose_errors(pose, episode.gt_pose)
        except AlignmentError:
            pose, score = None, float("-inf")
            err_m, err_deg = float("inf"), float("inf")
        return LocalizationResult(
            episode=idx,
            pose=pose,
            gt_pose=episode.gt_pose,
            error_m=err_m,
            error_deg=err_deg,
            difficulty=episode_difficulty(episode, config.evaluation),
            score=score,
        )

    items = list(enumerate(episodes))
    if threads <= 1:
        results = [run(item) for item in items]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, items))
    return sorted(results, key=lambda r: r.episode)


def random_pose_baseline(
    episodes: list[Episode],
    config: Config,
    seed: int,
    thresholds: tuple[tuple[float, float], ...],
    draws: int = 1000,
) -> dict[tuple[float, float], float]:
    """Expected recall of uniform random poses over the reference grid.

    Monte-Carlo: per episode, positions uniform over the grid's footprint
    and headings uniform over the circle; reported per threshold pair as the
    mean hit rate. The informed lower bound any learned model must beat.
    """
    if not episodes:
        raise ValueError("random_pose_baseline needs at least one episode")
    totals = {pair: 0.0 for pair in thresholds}
    for idx, episode in enumerate(episodes):
        rng = seeding.rng(seed, seeding.RANSAC, idx, 1)
        grid = episode.reference.grid
        ex, ey = grid.extent
        local = np.stack(
            [rng.uniform(0, ex, draws), rng.uniform(0, ey, draws)], axis=1
        )
        world = grid.origin.apply(local)
        angles = rng.uniform(-math.pi, math.pi, draws)
        dt = np.linalg.norm(world - np.asarray(episode.gt_pose.t), axis=1)
        da = np.degrees(np.abs(wrap_angle(angles - episode.gt_pose.angle)))
        for em, ed in thresholds:
            totals[(em, ed)] += float(np.mean((dt <= em) & (da <= ed)))
    return {pair: total / len(episodes) for pair, total in totals.items()}


# ------------------------------------------------------------------ pools


class ScenePool:
    """Lazily generated scenes with cached mapping passes.

    Scene seeds, appearance draws, and episode draws all live under the
    pool's ``(seed, stream, ...)`` namespace, so pools built for training
    (stream EPISODE), evaluation (stream EVAL), and probing (stream PROBE)
    never share scenes even at the same base seed.
    """

    def __init__(self, config: Config, seed: int, size: int, stream: int):
        if size < 1:
            raise ValueError("pool needs at least one scene")
        self.config = config
        self.seed = seed
        self.stream = stream
        gen = seeding.rng(seed, stream, 0)
        self.scene_seeds = [int(s) for s in gen.integers(0, 2**31, size)]
        self.episode_rng = seeding.rng(seed, stream, 1)
        self._scenes: list[SceneSpec | None] = [None] * size
        self._references: list[Reference | None] = [None] * size

    def __len__(self) -> int:
        return len(self.scene_seeds)

    def scene(self, k: int) -> SceneSpec:
        if self._scenes[k] is None:
            self._scenes[k] = generate_scene(self.config, self.scene_seeds[k])
        return self._scenes[k]

    def reference(self, k: int) -> Reference:
        if self._references[k] is None:
            gen = seeding.rng(self.seed, self.stream, 2, k)
            self._references[k] = prepare_reference(self.scene(k), self.config, gen)
        return self._references[k]

    def draw(self, difficulty: str = "any") -> Episode:
        k = int(self.episode_rng.integers(0, len(self)))
        return sample_episode(
            self.scene(k), self.config, self.episode_rng,
            difficulty=difficulty, reference=self.reference(k),
        )

    def draw_many(self, count: int, difficulty: str = "any") -> list[Episode]:
        return [self.draw(difficulty) for _ in range(count)]


def evaluation_episodes(
    config: Config, seed: int, count: int, difficulty: str = "any",
    n_scenes: int = 8,
) -> list[Episode]:
    """A held-out episode set drawn from the EVAL stream's own scenes."""
    pool = ScenePool(config, seed, n_scenes, stream=seeding.EVAL)
    return pool.draw_many(count, difficulty)


# --------------------------------------------------------------- training


def train_model(
    config: Config,
    seed: int,
    steps: int | None = None,
    n_scenes: int = 16,
    difficulty: str = "any",
    fuse_mode: str = "max",
    variant: str | None = None,
    state: TrainState | None = None,
    log=None,
) -> TrainState:
    """Contrastive training over a pool of procedural scenes.

    Resumes from ``state`` when given (the episode stream then continues from
    the state's own generator, not the pool's). ``log`` receives one metrics
    dict per step — the line-delimited stream the command line prints.
    """
    if steps is None:
        steps = config.training.total_steps
    pool = ScenePool(config, seed, n_scenes, stream=seeding.EPISODE)
    if state is None:
        state = init_train_state(config, seed)
    batch = max(1, config.training.batch_size)
    while state.step < steps:
        episodes = pool.draw_many(batch, difficulty)
        metrics = train_step(state, episodes, config, fuse_mode=fuse_mode, variant=variant)
        if log is not None:
            log(metrics)
    return state


# --------------------------------------------------------------- ablation

ABLATION_VARIANTS: tuple[tuple[str, str, str], ...] = (
    # row name, ground-encoder variant, multi-modal fusion mode
    ("full", "full", "max"),
    ("no_occupancy", "no_occupancy", "max"),
    ("avg_vertical", "avg_vertical", "max"),
    ("multimodal_avg", "full", "avg"),
)


@dataclass(frozen=True)
class AblationCell:
    """Held-out metrics of one (variant, seed) training run."""

    name: str
    seed: int
    recall: tuple[float, ...]
    auc: tuple[float, ...]


def run_ablation(
    config: Config,
    seeds: tuple[int, ...],
    steps: int,
    n_scenes: int = 16,
    n_eval: int = 100,
    eval_difficulty: str = "easy",
    variants: tuple[tuple[str, str, str], ...] = ABLATION_VARIANTS,
    threads: int = 1,
    log=None,
) -> list[AblationCell]:
    """Train every variant at every seed and score a shared held-out set.

    All variants at one seed consume byte-identical episode streams (same
    pool stream, same initial parameters where shapes agree) and are scored
    on the same held-out episodes, so per-seed differences are paired.
    """
    thresholds = config.evaluation.recall_thresholds
    cells = []
    for seed in seeds:
        held_out = evaluation_episodes(config, seed, n_eval, eval_difficulty)
        for name, variant, fuse_mode in variants:
            state = train_model(
                config, seed, steps=steps, n_scenes=n_scenes,
                fuse_mode=fuse_mode, variant=variant,
            )
            results = evaluate_episodes(
                state.params, held_out, config, seed,
                threads=threads, fuse_mode=fuse_mode, variant=variant,
            )
            cell = AblationCell(
                name=name,
                seed=seed,
                recall=tuple(recall(results, em, ed) for em, ed in thresholds),
                auc=tuple(recall_auc_value(results, em, ed) for em, ed in thresholds),
            )
            cells.append(cell)
            if log is not None:
                log(cell)
    return cells


def paired_difference(
    cells: list[AblationCell], name_a: str, name_b: str, metric: int = 0
) -> tuple[float, float, list[float]]:
    """Per-seed AUC differences a - b: (mean, sample std, deltas).

    Pairs cells by seed; raises when the two variants were not run on the
    same seeds. The 2-sigma band uses the sample standard deviation of the
    per-seed deltas (seed noise), not the across-variant spread.
    """
    a = {c.seed: c for c in cells if c.name == name_a}
    b = {c.seed: c for c in cells if c.name == name_b}
    if set(a) != set(b) or not a:
        raise ValueError(f"variants {name_a!r} and {name_b!r} need matching seeds")
    deltas = [a[s].auc[metric] - b[s].auc[metric] for s in sorted(a)]
    mean = float(np.mean(deltas))
    std = float(np.std(deltas, ddof=1)) if len(deltas) > 1 else 0.0
    return mean, std, deltas


def render_ablation_table(
    cells: list[AblationCell], thresholds: tuple[tuple[float, float], ...]
) -> str:
    """Tab-separated per-variant table: per-seed cells then a mean row."""
    head = ["variant", "seed"]
    for em, ed in thresholds:
        head += [f"recall@{em:g}m/{ed:g}deg", f"auc@{em:g}m/{ed:g}deg"]
    lines = ["\t".join(head)]
    names = []
    for cell in cells:
        if cell.name not in names:
            names.append(cell.name)
    for name in names:
        rows = [c for c in cells if c.name == name]
        for c in rows:
            vals = []
            for k in range(len(thresholds)):
                vals += [f"{100 * c.recall[k]:.1f}", f"{100 * c.auc[k]:.1f}"]
            lines.append("\t".join([name, str(c.seed)] + vals))
        vals = []
        for k in range(len(thresholds)):
            vals += [
                f"{100 * np.mean([c.recall[k] for c in rows]):.1f}",
                f"{100 * np.mean([c.auc[k] for c in rows]):.1f}",
            ]
        lines.append("\t".join([name, "mean"] + vals))
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------ probe

PROBE_SURFACES = (GROUND, MARKING, CURB)  # mutually exclusive ground footprint
PROBE_OBJECTS = (POLE, TREE, FACADE)  # overhanging, may overlap: binary each
PROBE_CLASSES = (MARKING, CURB, POLE, TREE, FACADE)  # scored in comparisons


@dataclass(frozen=True)
class ProbeExample:
    """One frozen map with its ground-truth rasters on the same grid."""

    nmap: NeuralMap
    surface: torch.Tensor  # (I, J) int64: index into PROBE_SURFACES, -1 unknown
    objects: torch.Tensor  # (I, J, len(PROBE_OBJECTS)) float 0/1


@dataclass(frozen=True)
class ProbeReport:
    """Per-class recall of a probe trained on frozen map features."""

    recalls: dict[str, float | None]
    final_loss: float
    steps: int
    n_train: int
    n_test: int
    frozen_checksum_ok: bool


def _empty_family(scene: SceneSpec, name: str) -> np.ndarray:
    return np.zeros((0, scene.arrays()[name].shape[1]))


def _only_families(scene: SceneSpec, keep: tuple[str, ...]) -> SceneSpec:
    changes = {
        name: _empty_family(scene, name)
        for name in scene.arrays()
        if name not in keep
    }
    return dataclasses.replace(scene, **changes)


def probe_labels(
    scene: SceneSpec, grid: MapGrid
) -> tuple[torch.Tensor, torch.Tensor]:
    """Ground-truth rasters for the probe, one label row per map cell.

    Surfaces are mutually exclusive in 2D, so the surface label is rendered
    with every overhanging family removed (objects never occlude it).
    Objects may overlap each other, so each object class gets its own binary
    presence raster rendered from that family alone.
    """
    surface_scene = _only_families(scene, ("markings", "curbs"))
    rendered = render_overhead(surface_scene, grid, grid.cell_size).labels
    surface = torch.full(rendered.shape, -1, dtype=torch.int64)
    for idx, cls in enumerate(PROBE_SURFACES):
        surface[torch.from_numpy(rendered == cls)] = idx

    family_of = {POLE: "poles", TREE: "trees", FACADE: "facades"}
    presence = []
    for cls in PROBE_OBJECTS:
        alone = _only_families(scene, (family_of[cls],))
        labels = render_overhead(alone, grid, grid.cell_size).labels
        presence.append(torch.from_numpy(labels == cls))
    objects = torch.stack(presence, dim=-1).to(torch.float64)
    return surface, objects


def probe_param_spec(feature_dim: int, hidden: int = 16) -> list:
    """Two-layer convolutional read-out with a head per label family."""
    return [
        ("probe.conv.w", (hidden, feature_dim, 3, 3)),
        ("probe.conv.b", (hidden,)),
        ("probe.surface.w", (len(PROBE_SURFACES), hidden, 1, 1)),
        ("probe.surface.b", (len(PROBE_SURFACES),)),
        ("probe.object.w", (len(PROBE_OBJECTS), hidden, 1, 1)),
        ("probe.object.b", (len(PROBE_OBJECTS),)),
    ]


def probe_forward(
    probe: ParamVector, features: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """(surface logits (I, J, S), object logits (I, J, O)) for one map."""
    x = features.permute(2, 0, 1).unsqueeze(0)
    h = F.relu(F.conv2d(x, probe["probe.conv.w"], probe["probe.conv.b"], padding=1))
    surface = F.conv2d(h, probe["probe.surface.w"], probe["probe.surface.b"])
    objects = F.conv2d(h, probe["probe.object.w"], probe["probe.object.b"])
    return (
        surface.squeeze(0).permute(1, 2, 0),
        objects.squeeze(0).permute(1, 2, 0),
    )


def probe_loss(probe: ParamVector, example: ProbeExample) -> torch.Tensor:
    """Cross-entropy over surfaces plus binary cross-entropy over objects.

    Both terms average over valid map cells; surface cells without a known
    surface label are excluded from the first term.
    """
    surface_logits, object_logits = probe_forward(probe, example.nmap.features)
    valid = example.nmap.valid
    dtype = surface_logits.dtype
    total = surface_logits.new_zeros(())
    labelled = valid & (example.surface >= 0)
    if bool(labelled.any()):
        total = total + F.cross_entropy(
            surface_logits[labelled], example.surface[labelled]
        )
    if bool(valid.any()):
        total = total + F.binary_cross_entropy_with_logits(
            object_logits[valid], example.objects[valid].to(dtype)
        )
    return total


def _adam_minimize(
    params: ParamVector, loss_fn, steps: int, lr: float,
    beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
) -> float:
    """Plain ADAM on a flat parameter vector; returns the final loss."""
    m = torch.zeros_like(params.data)
    v = torch.zeros_like(params.data)
    params.requires_grad_(True)
    last = float("nan")
    for t in range(1, steps + 1):
        params.data.grad = None
        loss = loss_fn(params)
        loss.backward()
        grad = params.data.grad
        with torch.no_grad():
            m.mul_(beta1).add_(grad, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
            m_hat = m / (1.0 - beta1**t)
            v_hat = v / (1.0 - beta2**t)
            params.data.add_(-lr * m_hat / (v_hat.sqrt() + eps))
        last = float(loss.detach().item())
    params.data.grad = None
    return last


def train_probe(
    examples: list[ProbeExample],
    seed: int,
    hidden: int = 16,
    steps: int = 400,
    lr: float = 3e-2,
) -> tuple[ParamVector, float]:
    """Fit the probe on frozen maps; returns (probe params, final loss)."""
    if not examples:
        raise ValueError("probe training needs at least one example")
    feature_dim = examples[0].nmap.feature_dim
    probe = init_params(
        probe_param_spec(feature_dim, hidden),
        seeding.rng(seed, seeding.PROBE, 0),
        dtype=examples[0].nmap.features.dtype,
    )

    def total_loss(pv: ParamVector) -> torch.Tensor:
        return torch.stack([probe_loss(pv, ex) for ex in examples]).mean()

    final = _adam_minimize(probe, total_loss, steps, lr)
    return probe, final


def probe_recall(
    probe: ParamVector, examples: list[ProbeExample]
) -> dict[str, float | None]:
    """Per-class recall over valid test cells; absent classes are None.

    Surface classes score argmax accuracy among cells carrying that label;
    object classes score sigmoid > 1/2 detection among cells containing the
    object.
    """
    hits = {cls: 0 for cls in PROBE_SURFACES + PROBE_OBJECTS}
    totals = {cls: 0 for cls in PROBE_SURFACES + PROBE_OBJECTS}
    with torch.no_grad():
        for ex in examples:
            surface_logits, object_logits = probe_forward(probe, ex.nmap.features)
            pred_surface = surface_logits.argmax(dim=-1)
            pred_objects = object_logits > 0  # sigmoid(x) > 1/2 iff x > 0
            valid = ex.nmap.valid
            for idx, cls in enumerate(PROBE_SURFACES):
                cells = valid & (ex.surface == idx)
                totals[cls] += int(cells.sum())
                hits[cls] += int((pred_surface[cells] == idx).sum())
            for idx, cls in enumerate(PROBE_OBJECTS):
                cells = valid & (ex.objects[..., idx] > 0.5)
                totals[cls] += int(cells.sum())
                hits[cls] += int(pred_objects[..., idx][cells].sum())
    return {
        CLASS_NAMES[cls]: (hits[cls] / totals[cls] if totals[cls] else None)
        for cls in PROBE_SURFACES + PROBE_OBJECTS
    }


def _params_checksum(params: ParamVector) -> str:
    return hashlib.sha256(params.numpy().tobytes()).hexdigest()


def frozen_map_examples(
    params: ParamVector,
    config: Config,
    seed: int,
    count: int,
    offset: int = 0,
    use_ground: bool = True,
    use_overhead: bool = True,
    variant: str | None = None,
) -> list[ProbeExample]:
    """Encode ``count`` scenes with frozen parameters and label their grids."""
    pool = ScenePool(config, seed, offset + count, stream=seeding.PROBE)
    examples = []
    with torch.no_grad():
        for k in range(offset, offset + count):
            reference = pool.reference(k)
            nmap = encode_reference(
                params, reference, config,
                use_ground=use_ground, use_overhead=use_overhead, variant=variant,
            )
            surface, objects = probe_labels(pool.scene(k), reference.grid)
            examples.append(
                ProbeExample(nmap=nmap.detach(), surface=surface, objects=objects)
            )
    return examples


def semantic_probe(
    params: ParamVector,
    config: Config,
    seed: int,
    n_train: int = 12,
    n_test: int = 6,
    hidden: int = 16,
    steps: int = 400,
    variant: str | None = None,
) -> ProbeReport:
    """Train a read-out on frozen maps and report held-out per-class recall.

    Only the probe's own weights are optimized; the map encoder is applied
    under no-grad and its parameter bytes are checksummed before and after.
    Train and test scenes come from disjoint draws of the PROBE stream.
    """
    before = _params_checksum(params)
    train_examples = frozen_map_examples(
        params, config, seed, n_train, offset=0, variant=variant
    )
    test_examples = frozen_map_examples(
        params, config, seed, n_test, offset=n_train, variant=variant
    )
    probe, final = train_probe(train_examples, seed, hidden=hidden, steps=steps)
    recalls = probe_recall(probe, test_examples)
    return ProbeReport(
        recalls=recalls,
        final_loss=final,
        steps=steps,
        n_train=n_train,
        n_test=n_test,
        frozen_checksum_ok=_params_checksum(params) == before,
    )


def render_probe_table(reports: dict[str, ProbeReport]) -> str:
    """Tab-separated per-class recall, one column per report label."""
    names = [CLASS_NAMES[cls] for cls in PROBE_SURFACES + PROBE_OBJECTS]
    lines = ["\t".join(["class"] + list(reports))]
    for name in names:
        cells = [name]
        for report in reports.values():
            value = report.recalls.get(name)
            cells.append("n/a" if value is None else f"{100 * value:.1f}")
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------- export


def feature_components(
    features: np.ndarray, count: int = 3, rel_tol: float = 1e-9
) -> tuple[np.ndarray, np.ndarray, int]:
    """Principal directions of row vectors: (components (count, F), mean, rank).

    Components are orthonormal eigenvectors of the covariance in decreasing
    eigenvalue order, each oriented so its largest-magnitude loading is
    positive (a deterministic sign convention). ``rank`` counts eigenvalues
    above ``rel_tol`` times the largest; trailing components beyond the rank
    are still returned (zero-variance directions).
    """
    x = np.asarray(features, dtype=np.float64)
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / max(len(x) - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:count]
    components = eigvecs[:, order].T
    eigvals = eigvals[order]
    for row in components:
        peak = np.argmax(np.abs(row))
        if row[peak] < 0:
            row *= -1.0
    top = max(float(eigvals[0]), 0.0)
    rank = int(np.sum(eigvals > rel_tol * top)) if top > 0 else 0
    return components, mean, rank


def feature_rgb(nmap: NeuralMap) -> np.ndarray:
    """(I, J, 3) floats in [0, 1]: PCA projection of valid-cell features.

    Each channel is min-max scaled over valid cells; a channel with no
    variance sits at mid-gray 0.5. Rank-deficient feature sets (< 3
    principal directions) fall back to grayscale from the leading component;
    invalid cells render black.
    """
    valid = nmap.valid.detach().cpu().numpy().astype(bool)
    if int(valid.sum()) < 3:
        raise ValueError("feature image needs at least 3 valid cells")
    feats = nmap.features.detach().cpu().numpy()
    rows = feats[valid].astype(np.float64)
    components, mean, rank = feature_components(rows)
    projected = (rows - mean) @ components.T  # (N, 3)
    if rank < 3:
        projected = np.repeat(projected[:, :1], 3, axis=1)
    scaled = np.empty_like(projected)
    for c in range(3):
        lo, hi = projected[:, c].min(), projected[:, c].max()
        if hi - lo < 1e-12:
            scaled[:, c] = 0.5
        else:
            scaled[:, c] = (projected[:, c] - lo) / (hi - lo)
    image = np.zeros(valid.shape + (3,), dtype=np.float64)
    image[valid] = scaled
    return image


def export_feature_image(nmap: NeuralMap, path) -> None:
    """Write the PCA-to-RGB rendering of a map as a PNG."""
    from PIL import Image

    rgb = feature_rgb(nmap)
    # image rows scan j (grid y) downward, columns scan i (grid x)
    pixels = np.round(255.0 * rgb.transpose(1, 0, 2)[::-1]).astype(np.uint8)
    Image.fromarray(pixels, mode="RGB").save(path, format="PNG")


def export_recall_curves(
    results_by_label: dict[str, list[LocalizationResult]],
    path,
    eps_deg: float = 5.0,
    max_m: float = 5.0,
) -> None:
    """Write recall-vs-position-error curves for several runs as an SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "bevloc"
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, results in results_by_label.items():
        ts, rec = recall_curve(results, eps_deg, max_m)
        ax.plot(ts, 100.0 * rec, label=label)
    ax.set_xlabel("position error (m)")
    ax.set_ylabel(f"recall within {eps_deg:g} deg (%)")
    ax.set_xlim(0, max_m)
    ax.set_ylim(0, 100)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
