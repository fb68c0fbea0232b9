"""Contrastive pose training.

The ground-truth pose is scored against RANSAC-mined negative poses with an
InfoNCE loss over featuremetric scores divided by a learnable temperature.
Gradients flow through the scoring of every pose but never through the
hypothesis sampling. All weights live in one flat vector, so the optimizer is
a plain ADAM update on a single tensor, and the gradient checker can walk
every named slice coordinate by coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import seeding
from .alignment import (
    MatchingMap,
    ScoredPoseSet,
    encode_query,
    encode_reference,
    init_model_params,
    model_param_spec,
    model_temperature,
    project_matching,
    ransac_localize,
    score_poses,
)
from .config import Config, TrainConfig, config_from_dict, config_to_dict
from .container import load_container, save_container
from .geometry import PoseSE2, pose_difference
from .params import ParamVector, params_from_numpy
from .synthworld import Episode


@dataclass
class TrainState:
    """Everything the training loop owns: weights, moments, step, rng."""

    params: ParamVector
    m: torch.Tensor  # ADAM first moment
    v: torch.Tensor  # ADAM second moment
    step: int
    rng: np.random.Generator
    skipped: int = 0  # degenerate episodes dropped so far

    @property
    def temperature(self) -> float:
        return model_temperature(self.params)


def init_train_state(
    config: Config, seed: int, dtype: torch.dtype = torch.float32
) -> TrainState:
    params = init_model_params(config, seeding.rng(seed, seeding.PARAMS), dtype)
    zeros = torch.zeros_like(params.data)
    return TrainState(
        params=params,
        m=zeros.clone(),
        v=zeros.clone(),
        step=0,
        rng=seeding.rng(seed, seeding.TRAIN),
    )


def learning_rate(cfg: TrainConfig, step: int) -> float:
    """Constant plateau, then cosine decay to zero at ``total_steps``."""
    hold = int(round(cfg.constant_fraction * cfg.total_steps))
    if step < hold or cfg.total_steps <= hold:
        return cfg.learning_rate
    frac = min((step - hold) / (cfg.total_steps - hold), 1.0)
    return 0.5 * cfg.learning_rate * (1.0 + math.cos(math.pi * frac))


# -------------------------------------------------------------------- loss


def infonce_loss(
    gt_pose: PoseSE2,
    negatives: ScoredPoseSet,
    query: MatchingMap,
    reference: MatchingMap,
    tau,
) -> torch.Tensor:
    """Contrastive loss of the true pose against negative poses.

    ``-log softmax`` of the true pose's score over {true} U {negatives}, all
    scores divided by ``tau`` (pass a tensor to differentiate through it).
    Equals ``ln(K + 1)`` exactly when all K+1 scores agree.
    """
    if negatives.empty:
        raise ValueError("need at least one negative pose")
    dtype = query.features.dtype
    poses = torch.cat(
        [
            torch.tensor([[gt_pose.angle, gt_pose.t[0], gt_pose.t[1]]], dtype=dtype),
            torch.as_tensor(negatives.poses, dtype=dtype),
        ]
    )
    scores = score_poses(poses, query, reference)
    if not torch.is_tensor(tau):
        tau = torch.tensor(float(tau), dtype=scores.dtype)
    logits = scores / tau
    return torch.logsumexp(logits, dim=0) - logits[0]


def mine_negatives(
    query: MatchingMap,
    reference: MatchingMap,
    gt_pose: PoseSE2,
    config: Config,
    rng: np.random.Generator,
    temperature: float,
    count: int | None = None,
    n_hypotheses: int | None = None,
) -> ScoredPoseSet:
    """Surviving RANSAC hypotheses in sampled order, excluding near-truth poses.

    The negatives are the correspondence-driven hypothesis field itself, not
    its score argmaxes: as the features improve, the sampler concentrates
    near the truth and the negatives harden on their own. Selecting the
    top-scoring hypotheses instead turns early training into a fight against
    the selection bias of the max, which a spatially collapsed map wins.
    Poses within one refinement step of the truth (both position and angle)
    are not negatives — penalizing them would punish correct answers.
    """
    cfg = config.training
    if count is None:
        count = cfg.num_negatives
    if n_hypotheses is None:
        n_hypotheses = config.ransac.train_hypotheses
    hyps = ransac_localize(
        query, reference, n_hypotheses, temperature, rng, config.ransac
    )
    if hyps.empty:
        return hyps
    keep = []
    for k in range(len(hyps)):
        dt, da = pose_difference(hyps.pose(k), gt_pose)
        if dt <= cfg.near_duplicate_xy and da <= math.radians(cfg.near_duplicate_deg):
            continue
        keep.append(k)
        if len(keep) >= count:
            break
    return ScoredPoseSet(
        poses=hyps.poses[keep],
        scores=hyps.scores[keep],
        provenance=[hyps.provenance[k] for k in keep],
    )


def episode_loss(
    params: ParamVector,
    episode: Episode,
    config: Config,
    mine_rng: np.random.Generator,
    use_ground: bool = True,
    use_overhead: bool = True,
    n_negatives: int | None = None,
    fuse_mode: str = "max",
    variant: str | None = None,
):
    """Differentiable InfoNCE loss of one episode, or None when degenerate.

    Returns ``(loss, negatives)``; hypothesis poses are mined with gradients
    blocked, then rescored inside the graph together with the truth.
    """
    qmap = project_matching(
        params, encode_query(params, episode.query_view, config, variant=variant)
    )
    rmap = project_matching(
        params,
        encode_reference(
            params, episode.reference, config,
            use_ground=use_ground, use_overhead=use_overhead,
            fuse_mode=fuse_mode, variant=variant,
        ),
    )
    tau = params["log_tau"].exp()
    negatives = mine_negatives(
        qmap, rmap, episode.gt_pose, config, mine_rng,
        float(tau.detach().item()), count=n_negatives,
    )
    if negatives.empty:
        return None
    return infonce_loss(episode.gt_pose, negatives, qmap, rmap, tau), negatives


# ---------------------------------------------------------------- training


def _modality_choice(rng: np.random.Generator, drop_p: float) -> tuple[bool, bool]:
    """Per-episode (use_ground, use_overhead); never drops both."""
    drop_ground = rng.random() < drop_p
    drop_overhead = rng.random() < drop_p
    if drop_ground and drop_overhead:
        drop_ground = drop_overhead = False
    return not drop_ground, not drop_overhead


def train_step(
    state: TrainState,
    episodes: list[Episode],
    config: Config,
    fuse_mode: str = "max",
    variant: str | None = None,
) -> dict:
    """One optimizer update over a batch of episodes (mutates ``state``).

    Degenerate episodes are skipped and counted; if the whole batch is
    degenerate the step is a no-op apart from the counter.
    """
    cfg = config.training
    lr = learning_rate(cfg, state.step)
    state.params.requires_grad_(True)
    if state.params.data.grad is not None:
        state.params.data.grad = None

    losses = []
    counts = []
    skipped = 0
    for episode in episodes:
        use_ground, use_overhead = _modality_choice(state.rng, cfg.modality_dropout)
        out = episode_loss(
            state.params, episode, config, state.rng,
            use_ground=use_ground, use_overhead=use_overhead,
            fuse_mode=fuse_mode, variant=variant,
        )
        if out is None:
            skipped += 1
            continue
        loss, negatives = out
        losses.append(loss)
        counts.append(len(negatives))
    state.skipped += skipped
    if not losses:
        return {
            "step": state.step, "loss": float("nan"), "lr": lr,
            "skipped": skipped, "negatives": 0.0, "tau": state.temperature,
        }

    total = torch.stack(losses).mean()
    total.backward()
    grad = state.params.data.grad

    with torch.no_grad():
        state.m.mul_(cfg.beta1).add_(grad, alpha=1.0 - cfg.beta1)
        state.v.mul_(cfg.beta2).addcmul_(grad, grad, value=1.0 - cfg.beta2)
        t = state.step + 1
        m_hat = state.m / (1.0 - cfg.beta1**t)
        v_hat = state.v / (1.0 - cfg.beta2**t)
        state.params.data.add_(-lr * m_hat / (v_hat.sqrt() + cfg.adam_eps))
    state.params.data.grad = None
    state.step += 1
    return {
        "step": state.step,
        "loss": float(total.detach().item()),
        "lr": lr,
        "skipped": skipped,
        "negatives": float(np.mean(counts)),
        "tau": state.temperature,
    }


# ------------------------------------------------------------- checkpoints


def save_checkpoint(path, state: TrainState, config: Config) -> None:
    arrays = {
        "params": state.params.numpy(),
        "m": state.m.numpy(),
        "v": state.v.numpy(),
    }
    meta = {
        "step": state.step,
        "skipped": state.skipped,
        "rng": seeding.generator_state(state.rng),
        "config": config_to_dict(config),
        "layout": [[name, list(info.shape)] for name, info in state.params.layout.items()],
    }
    save_container(path, arrays, meta)


def load_checkpoint(path) -> tuple[TrainState, Config]:
    arrays, meta = load_container(path)
    config = config_from_dict(meta["config"])
    spec = model_param_spec(config)
    stored = [(name, tuple(shape)) for name, shape in meta["layout"]]
    if stored != [(name, tuple(shape)) for name, shape in spec]:
        raise ValueError("checkpoint layout does not match its config")
    dtype = torch.float64 if arrays["params"].dtype == np.float64 else torch.float32
    params = params_from_numpy(arrays["params"], spec, dtype)
    state = TrainState(
        params=params,
        m=torch.tensor(arrays["m"], dtype=dtype),
        v=torch.tensor(arrays["v"], dtype=dtype),
        step=int(meta["step"]),
        rng=seeding.restore_generator(meta["rng"]),
        skipped=int(meta["skipped"]),
    )
    return state, config


# ---------------------------------------------------------- gradient check


@dataclass
class SliceCheck:
    name: str
    checked: int
    excluded: int  # coordinates sitting on kinks (two-scale FD disagreement)
    max_rel_err: float


@dataclass
class GradientReport:
    slices: list[SliceCheck] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def max_rel_err(self) -> float:
        return max((s.max_rel_err for s in self.slices), default=0.0)

    @property
    def checked(self) -> int:
        return sum(s.checked for s in self.slices)

    @property
    def excluded(self) -> int:
        return sum(s.excluded for s in self.slices)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def lines(self) -> list[str]:
        out = [
            f"{s.name}: checked {s.checked} (excluded {s.excluded}), "
            f"max rel err {s.max_rel_err:.3e}"
            for s in self.slices
        ]
        verdict = "PASS" if self.passed else "FAIL"
        out.append(
            f"overall: max rel err {self.max_rel_err:.3e} "
            f"(tolerance {self.tolerance:.1e}) {verdict}"
        )
        return out


def check_gradients(
    params: ParamVector,
    episode: Episode,
    config: Config,
    seed: int = 0,
    coords_per_slice: int = 200,
    tolerance: float = 1e-4,
    fd_step: float = 1e-5,
    kink_tol: float = 0.05,
    grad_floor: float = 1e-6,
    n_negatives: int = 8,
) -> GradientReport:
    """Analytic gradient of the full loss vs. central finite differences.

    Runs in double precision on frozen mined poses (sampling has no gradient,
    so freezing it keeps the loss a deterministic function of the weights).
    Each slice contributes up to ``coords_per_slice`` random coordinates.
    Coordinates where halving the FD step shifts the estimate by more than
    ``kink_tol`` relative sit on a non-differentiable point (max/clamp
    switches, bilinear cell edges); they are excluded and counted.

    Relative error is ``|analytic - fd| / max(|analytic|, |fd|, grad_floor)``:
    gradients below ``grad_floor`` are compared against the floor, since
    finite differences of an O(1) loss carry ~1e-10 absolute rounding noise
    that would swamp the ratio for such coordinates.
    """
    base = params.detach_clone(torch.float64)
    with torch.no_grad():
        qmap = project_matching(base, encode_query(base, episode.query_view, config))
        rmap = project_matching(base, encode_reference(base, episode.reference, config))
    negatives = mine_negatives(
        qmap, rmap, episode.gt_pose, config,
        seeding.rng(seed, seeding.RANSAC), model_temperature(base),
        count=n_negatives,
    )
    if negatives.empty:
        raise ValueError("episode is degenerate: no negatives to build a loss")

    def loss_fn(pv: ParamVector) -> torch.Tensor:
        q = project_matching(pv, encode_query(pv, episode.query_view, config))
        r = project_matching(pv, encode_reference(pv, episode.reference, config))
        return infonce_loss(
            episode.gt_pose, negatives, q, r, pv["log_tau"].exp()
        )

    work = base.detach_clone().requires_grad_(True)
    loss_fn(work).backward()
    analytic = work.data.grad.numpy()

    flat = base.numpy()
    layout = base.layout

    def loss_at(vec: np.ndarray) -> float:
        pv = ParamVector(torch.tensor(vec, dtype=torch.float64), layout)
        with torch.no_grad():
            return float(loss_fn(pv).item())

    def central(c: int, h: float) -> float:
        up = flat.copy()
        up[c] += h
        down = flat.copy()
        down[c] -= h
        return (loss_at(up) - loss_at(down)) / (2.0 * h)

    gen = np.random.default_rng(seed)
    report = GradientReport(tolerance=tolerance)
    for name, info in layout.items():
        count = min(coords_per_slice, info.numel)
        coords = gen.choice(info.numel, size=count, replace=False) + info.offset
        errors = []
        excluded = 0
        for c in coords:
            h = fd_step * max(1.0, abs(float(flat[c])))
            fd_full = central(int(c), h)
            fd_half = central(int(c), h / 2.0)
            gap = abs(fd_full - fd_half)
            if gap > kink_tol * max(abs(fd_full), abs(fd_half), 1e-6):
                excluded += 1
                continue
            a = float(analytic[c])
            rel = abs(a - fd_half) / max(abs(a), abs(fd_half), grad_floor)
            errors.append(rel)
        report.slices.append(
            SliceCheck(name, len(errors), excluded, max(errors, default=0.0))
        )
    return report
