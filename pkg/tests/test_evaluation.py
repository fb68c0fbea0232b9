"""Metrics, pools, ablation plumbing, probe, and export tests."""

import dataclasses
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import bevloc.evaluation as ev
from bevloc import seeding
from bevloc.alignment import AlignmentError, init_model_params
from bevloc.config import EvalConfig
from bevloc.geometry import MapGrid, NeuralMap, PoseSE2
from bevloc.synthworld import (
    CURB,
    FACADE,
    MARKING,
    POLE,
    TREE,
    Episode,
    Reference,
    render_overhead,
)
from helpers import make_micro_config, make_small_config

EVAL = EvalConfig()
THRESHOLDS = ((2.5, 5.0), (5.0, 10.0))


def result(i, err_m, err_deg, difficulty="easy", score=1.0):
    return ev.LocalizationResult(
        episode=i, pose=PoseSE2(0.0, [0.0, 0.0]), gt_pose=PoseSE2(0.0, [0.0, 0.0]),
        error_m=err_m, error_deg=err_deg, difficulty=difficulty, score=score,
    )


# ------------------------------------------------------------- difficulty


@settings(max_examples=300, deadline=None)
@given(
    st.floats(0.0, 40.0, allow_nan=False),
    st.floats(0.0, 180.0, allow_nan=False),
)
def test_difficulty_partitions_every_offset(dist, angle):
    tag = ev.difficulty_tag(dist, angle, EVAL)
    assert tag in ("easy", "medium", "hard")
    assert (tag == "easy") == (dist < 10.0 and angle < 45.0)
    assert (tag == "hard") == (dist > 10.0 and angle > 60.0)


def test_difficulty_boundaries_are_medium():
    assert ev.difficulty_tag(10.0, 0.0, EVAL) == "medium"
    assert ev.difficulty_tag(0.0, 45.0, EVAL) == "medium"
    assert ev.difficulty_tag(10.0, 61.0, EVAL) == "medium"
    assert ev.difficulty_tag(10.1, 60.0, EVAL) == "medium"


def test_pose_errors_zero_and_known():
    a = PoseSE2(0.2, [1.0, 2.0])
    assert ev.pose_errors(a, a) == (0.0, 0.0)
    b = PoseSE2(0.2 + math.radians(30.0), [4.0, 6.0])
    dt, da = ev.pose_errors(b, a)
    assert dt == pytest.approx(5.0)
    assert da == pytest.approx(30.0)


def test_result_rejects_negative_errors():
    with pytest.raises(ValueError):
        result(0, -1.0, 0.0)


# ---------------------------------------------------------------- metrics


def test_recall_counts_joint_hits():
    rs = [result(0, 1.0, 1.0), result(1, 1.0, 50.0), result(2, 9.0, 1.0)]
    assert ev.recall(rs, 2.5, 5.0) == pytest.approx(1 / 3)
    assert ev.recall(rs, 10.0, 5.0) == pytest.approx(2 / 3)
    assert ev.recall(rs, 10.0, 90.0) == pytest.approx(1.0)


def test_auc_all_exact_is_one():
    rs = [result(i, 0.0, 0.0) for i in range(5)]
    for em, ed in THRESHOLDS:
        assert ev.recall_auc_value(rs, em, ed) == pytest.approx(1.0)
    table = ev.render_metric_table(ev.recall_auc(rs, THRESHOLDS), THRESHOLDS)
    assert "100.0" in table


def test_auc_all_infinite_is_zero():
    rs = [result(i, float("inf"), float("inf")) for i in range(5)]
    for em, ed in THRESHOLDS:
        assert ev.recall_auc_value(rs, em, ed) == 0.0


def test_auc_matches_hand_integration():
    # errors (m, deg): hits appear at position error 0 and 1; one result is
    # angle-gated out, one is beyond range. Gated recall r(t) is 1/4 on
    # [0, 1) and 1/2 on [1, 2.5]; the 0.1-step trapezoid crosses the jump at
    # t in [0.9, 1.0], giving (9*0.025 + 0.0375 + 15*0.05) / 2.5 = 0.405.
    rs = [
        result(0, 0.0, 0.0),
        result(1, 1.0, 2.0),
        result(2, 2.0, 20.0),
        result(3, 10.0, 0.0),
    ]
    assert ev.recall_auc_value(rs, 2.5, 5.0) == pytest.approx(0.405)


def test_angle_gate_blocks_close_positions():
    rs = [result(0, 0.0, 90.0)]
    assert ev.recall(rs, 5.0, 5.0) == 0.0
    assert ev.recall_auc_value(rs, 5.0, 5.0) == 0.0


@settings(max_examples=100, deadline=None)
@given(
    st.lists(
        st.tuples(st.floats(0.0, 20.0), st.floats(0.0, 180.0)),
        min_size=1,
        max_size=12,
    ),
    st.floats(0.5, 10.0),
    st.floats(0.5, 10.0),
    st.floats(1.0, 90.0),
    st.floats(1.0, 90.0),
)
def test_metrics_monotone_in_thresholds(errors, m1, m2, a1, a2):
    rs = [result(i, em, ea) for i, (em, ea) in enumerate(errors)]
    lo = (min(m1, m2), min(a1, a2))
    hi = (max(m1, m2), max(a1, a2))
    assert ev.recall(rs, *lo) <= ev.recall(rs, *hi)
    assert ev.recall_auc_value(rs, *lo) <= ev.recall_auc_value(rs, *hi) + 1e-12


def test_recall_auc_rows_cover_splits_present():
    rs = [
        result(0, 0.0, 0.0, "easy"),
        result(1, 1.0, 1.0, "hard"),
        result(2, 30.0, 90.0, "hard"),
    ]
    rows = ev.recall_auc(rs, THRESHOLDS)
    assert [r.split for r in rows] == ["overall", "easy", "hard"]
    assert [r.count for r in rows] == [3, 1, 2]
    hard = rows[2]
    assert hard.recall[0] == pytest.approx(0.5)


def test_metrics_reject_empty():
    for fn in (
        lambda: ev.recall([], 1.0, 1.0),
        lambda: ev.recall_auc([], THRESHOLDS),
        lambda: ev.recall_auc_value([], 1.0, 1.0),
    ):
        with pytest.raises(ValueError):
            fn()


# ------------------------------------------------------------- evaluation


def test_evaluate_episodes_thread_count_invariant():
    config = make_micro_config()
    params = init_model_params(config, seeding.rng(3, seeding.PARAMS))
    episodes = ev.evaluation_episodes(config, 5, 4, "easy", n_scenes=2)
    one = ev.evaluate_episodes(params, episodes, config, seed=9, threads=1)
    four = ev.evaluate_episodes(params, episodes, config, seed=9, threads=4)
    assert [r.episode for r in one] == list(range(4))
    for a, b in zip(one, four):
        assert a.error_m == b.error_m
        assert a.error_deg == b.error_deg
        assert a.score == b.score
        assert a.difficulty == b.difficulty


def test_evaluate_episodes_rederives_difficulty():
    config = make_micro_config()
    params = init_model_params(config, seeding.rng(3, seeding.PARAMS))
    episodes = ev.evaluation_episodes(config, 5, 2, "easy", n_scenes=2)
    mislabelled = [dataclasses.replace(e, difficulty="hard") for e in episodes]
    results = ev.evaluate_episodes(params, mislabelled, config, seed=9)
    assert all(r.difficulty == "easy" for r in results)


def test_evaluate_episodes_flags_degenerate_alignment(monkeypatch):
    config = make_micro_config()
    params = init_model_params(config, seeding.rng(3, seeding.PARAMS))
    episodes = ev.evaluation_episodes(config, 5, 2, "easy", n_scenes=2)

    def explode(*args, **kwargs):
        raise AlignmentError("no overlap")

    monkeypatch.setattr(ev, "align_maps", explode)
    results = ev.evaluate_episodes(params, episodes, config, seed=9)
    for r in results:
        assert r.pose is None
        assert math.isinf(r.error_m) and math.isinf(r.error_deg)
        assert r.score == float("-inf")
        assert r.difficulty == "easy"


def test_random_pose_baseline_matches_analytic_rate():
    # gt centred in the grid, hit disc fully inside: the hit probability
    # factorizes into (disc area / grid area) * (angular window / full turn)
    grid = MapGrid(PoseSE2(0.0, [0.0, 0.0]), 0.5, (32, 16))
    gt = PoseSE2(0.0, [8.0, 4.0])
    reference = Reference(views=(), overhead=None, grid=grid, epoch=0)
    episode = Episode(0, reference, None, gt, "any")
    est = ev.random_pose_baseline(
        [episode], make_micro_config(), seed=2, thresholds=((2.5, 5.0),),
        draws=60_000,
    )[(2.5, 5.0)]
    expected = (math.pi * 2.5**2 / (16.0 * 8.0)) * (10.0 / 360.0)
    assert est == pytest.approx(expected, abs=2e-3)


def test_random_pose_baseline_rejects_empty():
    with pytest.raises(ValueError):
        ev.random_pose_baseline([], make_micro_config(), 0, THRESHOLDS)


# ------------------------------------------------------------------ pools


def test_scene_pool_is_deterministic():
    config = make_micro_config()
    a = ev.ScenePool(config, 7, 3, stream=seeding.EPISODE)
    b = ev.ScenePool(config, 7, 3, stream=seeding.EPISODE)
    assert a.scene_seeds == b.scene_seeds
    ea = [a.draw("easy") for _ in range(3)]
    eb = [b.draw("easy") for _ in range(3)]
    for x, y in zip(ea, eb):
        assert x.gt_pose.angle == y.gt_pose.angle
        assert np.array_equal(x.gt_pose.t, y.gt_pose.t)
        assert x.scene_seed == y.scene_seed


def test_scene_pool_streams_are_disjoint():
    config = make_micro_config()
    train = ev.ScenePool(config, 7, 4, stream=seeding.EPISODE)
    heldout = ev.ScenePool(config, 7, 4, stream=seeding.EVAL)
    assert set(train.scene_seeds).isdisjoint(heldout.scene_seeds)


def test_scene_pool_caches_references():
    config = make_micro_config()
    pool = ev.ScenePool(config, 7, 2, stream=seeding.EPISODE)
    assert pool.reference(0) is pool.reference(0)
    episodes = [pool.draw() for _ in range(4)]
    for e in episodes:
        k = pool.scene_seeds.index(e.scene_seed)
        assert e.reference is pool.reference(k)


def test_evaluation_episodes_difficulty_tags_hold():
    # hard-split poses need the wider world: every micro-world pose within
    # sight of the map is less than 10 m from some mapping view
    config = make_small_config()
    for difficulty in ("easy", "hard"):
        episodes = ev.evaluation_episodes(config, 3, 3, difficulty, n_scenes=2)
        for e in episodes:
            assert ev.episode_difficulty(e, config.evaluation) == difficulty


# --------------------------------------------------------------- training


def test_train_model_runs_and_resumes():
    config = make_micro_config(training={"total_steps": 4})
    logs = []
    state = ev.train_model(config, seed=1, steps=2, n_scenes=2, log=logs.append)
    assert state.step == 2
    assert [m["step"] for m in logs] == [1, 2]
    resumed = ev.train_model(config, seed=1, steps=4, n_scenes=2, state=state)
    assert resumed.step == 4


def test_train_model_is_deterministic():
    config = make_micro_config(training={"total_steps": 2})
    a = ev.train_model(config, seed=1, steps=2, n_scenes=2)
    b = ev.train_model(config, seed=1, steps=2, n_scenes=2)
    assert torch.equal(a.params.data, b.params.data)


# --------------------------------------------------------------- ablation


def make_cells():
    return [
        ev.AblationCell("full", 0, (0.8,), (0.70,)),
        ev.AblationCell("full", 1, (0.9,), (0.80,)),
        ev.AblationCell("no_occupancy", 0, (0.7,), (0.60,)),
        ev.AblationCell("no_occupancy", 1, (0.8,), (0.72,)),
    ]


def test_paired_difference_statistics():
    mean, std, deltas = ev.paired_difference(make_cells(), "full", "no_occupancy")
    assert deltas == pytest.approx([0.10, 0.08])
    assert mean == pytest.approx(0.09)
    assert std == pytest.approx(np.std([0.10, 0.08], ddof=1))


def test_paired_difference_requires_matching_seeds():
    cells = make_cells()[:3]
    with pytest.raises(ValueError):
        ev.paired_difference(cells, "full", "no_occupancy")


def test_render_ablation_table_has_mean_rows():
    table = ev.render_ablation_table(make_cells(), ((2.5, 5.0),))
    lines = table.strip().split("\n")
    assert lines[0].split("\t") == ["variant", "seed", "recall@2.5m/5deg", "auc@2.5m/5deg"]
    assert "full\tmean\t85.0\t75.0" in table
    assert "no_occupancy\tmean\t75.0\t66.0" in table


@pytest.mark.slow
def test_run_ablation_smoke():
    config = make_micro_config(training={"total_steps": 2})
    variants = (("full", "full", "max"), ("multimodal_avg", "full", "avg"))
    cells = ev.run_ablation(
        config, seeds=(0,), steps=2, n_scenes=2, n_eval=2, variants=variants,
    )
    assert [c.name for c in cells] == ["full", "multimodal_avg"]
    for cell in cells:
        assert len(cell.auc) == len(config.evaluation.recall_thresholds)
        assert all(0.0 <= v <= 1.0 for v in cell.auc)


# ------------------------------------------------------------------ probe


def test_probe_labels_expose_occluded_surfaces_and_objects():
    config = make_micro_config()
    pool = ev.ScenePool(config, 1, 1, stream=seeding.PROBE)
    scene, grid = pool.scene(0), pool.reference(0).grid
    surface, objects = ev.probe_labels(scene, grid)
    assert surface.shape == tuple(grid.shape)
    assert objects.shape == tuple(grid.shape) + (len(ev.PROBE_OBJECTS),)
    # the full argmax render hides surfaces under objects; family-alone
    # rasters must still flag those object cells as present
    full = render_overhead(scene, grid, grid.cell_size).labels
    for idx, cls in enumerate(ev.PROBE_OBJECTS):
        covered = torch.from_numpy(full == cls)
        assert bool((objects[..., idx][covered] > 0.5).all())
    # with objects stripped away every cell carries a known surface
    assert int((surface >= 0).sum()) == surface.numel()


def one_hot_example(rng, shape=(24, 12)):
    """Features literally encode the labels: separable by construction."""
    surface = torch.from_numpy(rng.integers(0, 3, shape)).to(torch.int64)
    objects = torch.from_numpy(rng.random(shape + (3,)) < 0.25).to(torch.float64)
    feats = torch.zeros(shape + (8,), dtype=torch.float64)
    feats.scatter_(2, surface.unsqueeze(-1), 1.0)
    feats[..., 3:6] = objects
    grid = MapGrid(PoseSE2(0.0, [0.0, 0.0]), 0.5, shape)
    nmap = NeuralMap(grid, feats, torch.ones(shape, dtype=torch.bool))
    return ev.ProbeExample(nmap=nmap, surface=surface, objects=objects)


def test_probe_on_oracle_features_reaches_full_recall():
    rng = np.random.default_rng(0)
    train = [one_hot_example(rng) for _ in range(2)]
    test = [one_hot_example(rng) for _ in range(2)]
    probe, final = ev.train_probe(train, seed=0, hidden=8, steps=300, lr=5e-2)
    recalls = ev.probe_recall(probe, test)
    for name, value in recalls.items():
        assert value == 1.0, (name, value)
    assert final < 0.05


def test_probe_on_noise_features_stays_near_prior():
    rng = np.random.default_rng(1)

    def noise_example():
        shape = (24, 12)
        surface = torch.from_numpy(
            np.where(rng.random(shape) < 0.7, 0, rng.integers(1, 3, shape))
        ).to(torch.int64)
        objects = torch.from_numpy(rng.random(shape + (3,)) < 0.1).to(torch.float64)
        feats = torch.from_numpy(rng.normal(size=shape + (8,)))
        grid = MapGrid(PoseSE2(0.0, [0.0, 0.0]), 0.5, shape)
        nmap = NeuralMap(grid, feats, torch.ones(shape, dtype=torch.bool))
        return ev.ProbeExample(nmap=nmap, surface=surface, objects=objects)

    train = [noise_example() for _ in range(2)]
    test = [noise_example() for _ in range(2)]
    probe, _ = ev.train_probe(train, seed=0, hidden=8, steps=200, lr=5e-2)
    recalls = ev.probe_recall(probe, test)
    # informationless features leave each class near its prior rate: the
    # 70%-prior surface stays near 0.7, the 10%-prior objects near zero
    assert recalls["ground"] == pytest.approx(0.7, abs=0.2)
    for name in ("marking", "curb", "pole", "tree", "facade"):
        assert recalls[name] is None or recalls[name] < 0.35, (name, recalls[name])


def test_train_probe_rejects_empty():
    with pytest.raises(ValueError):
        ev.train_probe([], seed=0)


@pytest.mark.slow
def test_semantic_probe_freezes_encoder():
    config = make_micro_config()
    params = init_model_params(config, seeding.rng(2, seeding.PARAMS))
    before = params.numpy().copy()
    report = ev.semantic_probe(
        params, config, seed=4, n_train=2, n_test=1, hidden=8, steps=50,
    )
    assert report.frozen_checksum_ok
    assert np.array_equal(params.numpy(), before)
    assert set(report.recalls) == {
        "ground", "marking", "curb", "pole", "tree", "facade",
    }
    for value in report.recalls.values():
        assert value is None or 0.0 <= value <= 1.0
    table = ev.render_probe_table({"trained": report})
    assert table.startswith("class\ttrained")


# ----------------------------------------------------------------- export


def random_map(rng, shape=(12, 10), dim=8, valid_p=0.8):
    feats = torch.from_numpy(rng.normal(size=shape + (dim,)))
    valid = torch.from_numpy(rng.random(shape) < valid_p)
    valid[:3, 0] = True  # keep at least 3 valid cells
    grid = MapGrid(PoseSE2(0.0, [0.0, 0.0]), 0.5, shape)
    return NeuralMap(grid, feats, valid)


def test_feature_components_match_svd_oracle():
    rng = np.random.default_rng(3)
    rows = rng.normal(size=(200, 8)) @ rng.normal(size=(8, 8))
    components, mean, rank = ev.feature_components(rows)
    assert rank == 3  # counts only the three returned directions
    # independent oracle: dominant right singular vectors of centred rows
    centered = rows - rows.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    oracle = vt[:3]
    # reconstruction from 3 components is basis-sign independent
    ours = centered @ components.T @ components
    theirs = centered @ oracle.T @ oracle
    assert np.allclose(ours, theirs, atol=1e-6)
    # sign convention: every component's peak loading is positive
    for row in components:
        assert row[np.argmax(np.abs(row))] > 0


def test_feature_components_on_axis_aligned_data():
    # symmetric +/- pairs make the sample covariance exactly diagonal, so
    # the principal directions are exactly signed basis vectors
    rows = []
    for channel, scale, copies in ((1, 3.0, 8), (4, 2.0, 6), (2, 1.0, 4)):
        vec = np.zeros(6)
        vec[channel] = scale
        rows += [vec, -vec] * copies
    components, _, _ = ev.feature_components(np.array(rows))
    peaks = [int(np.argmax(np.abs(row))) for row in components]
    assert peaks == [1, 4, 2]
    for row, peak in zip(components, peaks):
        assert row[peak] == pytest.approx(1.0, abs=1e-12)
        off = np.delete(row, peak)
        assert np.allclose(off, 0.0, atol=1e-12)


def test_feature_rgb_constant_map_is_mid_gray(tmp_path):
    shape = (8, 6)
    grid = MapGrid(PoseSE2(0.0, [0.0, 0.0]), 0.5, shape)
    feats = torch.full(shape + (5,), 0.75)
    nmap = NeuralMap(grid, feats, torch.ones(shape, dtype=torch.bool))
    rgb = ev.feature_rgb(nmap)
    assert np.all(rgb == 0.5)
    path = tmp_path / "flat.png"
    ev.export_feature_image(nmap, path)
    from PIL import Image

    pixels = np.asarray(Image.open(path))
    assert pixels.shape == (6, 8, 3)
    assert np.all(pixels == pixels[0, 0])
    assert int(pixels[0, 0, 0]) in (127, 128)


def test_feature_rgb_rank_deficient_goes_grayscale():
    rng = np.random.default_rng(5)
    shape = (10, 8)
    direction = rng.normal(size=6)
    scale = rng.normal(size=shape + (1,))
    feats = torch.from_numpy(scale * direction)
    grid = MapGrid(PoseSE2(0.0, [0.0, 0.0]), 0.5, shape)
    nmap = NeuralMap(grid, feats, torch.ones(shape, dtype=torch.bool))
    rgb = ev.feature_rgb(nmap)
    assert np.allclose(rgb[..., 0], rgb[..., 1])
    assert np.allclose(rgb[..., 0], rgb[..., 2])
    assert rgb[..., 0].max() == pytest.approx(1.0)


def test_feature_rgb_needs_three_valid_cells():
    shape = (4, 4)
    grid = MapGrid(PoseSE2(0.0, [0.0, 0.0]), 0.5, shape)
    valid = torch.zeros(shape, dtype=torch.bool)
    valid[0, 0] = valid[1, 1] = True
    nmap = NeuralMap(grid, torch.randn(shape + (4,)), valid)
    with pytest.raises(ValueError):
        ev.feature_rgb(nmap)


def test_feature_rgb_masks_invalid_cells_black():
    rng = np.random.default_rng(6)
    nmap = random_map(rng, valid_p=0.5)
    rgb = ev.feature_rgb(nmap)
    invalid = ~nmap.valid.numpy()
    assert np.all(rgb[invalid] == 0.0)
    assert rgb[nmap.valid.numpy()].max() == pytest.approx(1.0)


def test_export_recall_curves_svg(tmp_path):
    rs = {
        "trained": [result(i, 0.1 * i, 1.0) for i in range(10)],
        "untrained": [result(i, 1.0 * i, 1.0) for i in range(10)],
    }
    path = tmp_path / "curves.svg"
    ev.export_recall_curves(rs, path)
    head = path.read_text()[:400]
    assert "<svg" in head
    again = tmp_path / "curves2.svg"
    ev.export_recall_curves(rs, again)
    assert path.read_bytes() == again.read_bytes()
