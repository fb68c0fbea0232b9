"""Command-line interface over the whole pipeline.

Subcommands: generate, train, localize, evaluate, ablate, probe, export,
check-grad. Exit codes: 0 success, 1 usage error, 2 data error (missing or
malformed files), 3 numerical failure (degenerate alignment, failed
gradient check). All artifacts are deterministic given (config, seed);
``--threads`` only parallelizes episode evaluation and never changes output
bytes.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np
import torch

from . import seeding
from .alignment import AlignmentError, init_model_params, model_param_spec
from .config import Config, load_config, torch_dtype
from .container import load_episodes, save_episodes
from .geometry import PoseSE2
from .learning import check_gradients, load_checkpoint, save_checkpoint
from .synthworld import generate_scene, prepare_reference, sample_episode
from .tiles import TileError, read_tile, write_tile
from . import evaluation as ev

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class DataError(RuntimeError):
    """Input files or their contents cannot be used."""


class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on bad usage; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="YAML config overriding packaged defaults")
    sub.add_argument("--seed", type=int, default=0, help="base seed (default 0)")
    sub.add_argument(
        "--threads", type=int, default=1,
        help="episode-evaluation workers; never changes results",
    )
    sub.add_argument(
        "--precision", choices=("single", "double"),
        help="parameter precision (default from config)",
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="bevloc", description=__doc__.split("\n")[0])
    subs = parser.add_subparsers(dest="command", metavar="command")
    subs.required = True

    gen = subs.add_parser("generate", help="sample scenes and episodes to a file")
    gen.add_argument("--output", required=True, help="episode container (.npz)")
    gen.add_argument("--count", type=int, default=20)
    gen.add_argument("--scenes", type=int, default=4)
    gen.add_argument("--difficulty", default="any",
                     choices=("easy", "hard", "any", "zero"))
    gen.set_defaults(handler=cmd_generate)

    tr = subs.add_parser("train", help="contrastive training; metrics per line")
    tr.add_argument("--output", required=True, help="checkpoint path (.npz)")
    tr.add_argument("--steps", type=int, help="default: config total_steps")
    tr.add_argument("--scenes", type=int, default=16)
    tr.add_argument("--difficulty", default="any",
                    choices=("easy", "hard", "any", "zero"))
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.add_argument("--log-every", type=int, default=1,
                    help="emit every Nth metric line")
    tr.set_defaults(handler=cmd_train)

    loc = subs.add_parser("localize", help="align episodes, print pose + error")
    loc.add_argument("--episodes", required=True, help="file from `generate`")
    loc.add_argument("--checkpoint", help="trained model (default: fresh params)")
    loc.add_argument("--index", type=int, help="single episode index")
    loc.add_argument("--hypotheses", type=int, help="pose samples per episode")
    loc.set_defaults(handler=cmd_localize)

    evl = subs.add_parser("evaluate", help="recall/AUC tables over episodes")
    evl.add_argument("--episodes", help="file from `generate` (default: sample)")
    evl.add_argument("--checkpoint", help="trained model (default: fresh params)")
    evl.add_argument("--count", type=int, default=50,
                     help="episodes to sample when no file is given")
    evl.add_argument("--scenes", type=int, default=4)
    evl.add_argument("--difficulty", default="any",
                     choices=("easy", "hard", "any", "zero"))
    evl.add_argument("--baseline", action="store_true",
                     help="append the random-pose recall row")
    evl.add_argument("--curves", help="write recall curves to this SVG")
    evl.add_argument("--output", help="write the table here instead of stdout")
    evl.set_defaults(handler=cmd_evaluate)

    abl = subs.add_parser("ablate", help="train and compare model variants")
    abl.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    abl.add_argument("--steps", type=int, required=True)
    abl.add_argument("--scenes", type=int, default=16)
    abl.add_argument("--eval-count", type=int, default=50)
    abl.add_argument("--difficulty", default="easy",
                     choices=("easy", "hard", "any"))
    abl.set_defaults(handler=cmd_ablate)

    pr = subs.add_parser("probe", help="semantic read-out on frozen maps")
    pr.add_argument("--checkpoint", help="trained model (default: fresh params)")
    pr.add_argument("--train-scenes", type=int, default=12)
    pr.add_argument("--test-scenes", type=int, default=6)
    pr.add_argument("--steps", type=int, default=400)
    pr.add_argument("--hidden", type=int, default=16)
    pr.add_argument("--no-control", action="store_true",
                    help="skip the random-frozen-encoder control column")
    pr.set_defaults(handler=cmd_probe)

    ex = subs.add_parser("export", help="write map tiles and PCA images")
    ex.add_argument("--checkpoint", help="trained model (default: fresh params)")
    ex.add_argument("--scene-seed", type=int, default=0,
                    help="scene to encode (ignored with --from-tile)")
    ex.add_argument("--tile", help="write the encoded map here (.bt)")
    ex.add_argument("--tile-precision", choices=("half", "single"),
                    default="single")
    ex.add_argument("--image", help="write the PCA rendering here (.png)")
    ex.add_argument("--from-tile", help="render an existing tile instead")
    ex.set_defaults(handler=cmd_export)

    cg = subs.add_parser("check-grad", help="analytic vs finite-difference")
    cg.add_argument("--coords", type=int, default=200,
                    help="coordinates checked per parameter slice")
    cg.add_argument("--negatives", type=int, default=8)
    cg.add_argument("--tolerance", type=float, default=1e-4)
    cg.set_defaults(handler=cmd_check_grad)

    for sub in subs.choices.values():
        _add_common(sub)
    return parser


# ----------------------------------------------------------------- shared


def _config(args) -> Config:
    try:
        config = load_config(args.config)
    except FileNotFoundError as exc:
        raise DataError(f"config file not found: {args.config}") from exc
    except Exception as exc:  # malformed YAML / bad field values
        raise DataError(f"cannot load config {args.config}: {exc}") from exc
    if args.precision:
        config.precision = args.precision
    return config


def _dtype(config: Config):
    return torch_dtype(config.precision)


def _params(args, config: Config):
    """Model parameters: from --checkpoint when given, else fresh.

    With a checkpoint, the active config must describe the same parameter
    layout (the checkpoint's own config is the usual choice and the default
    when --config is omitted).
    """
    if getattr(args, "checkpoint", None):
        try:
            state, ckpt_config = load_checkpoint(args.checkpoint)
        except FileNotFoundError as exc:
            raise DataError(f"checkpoint not found: {args.checkpoint}") from exc
        except (ValueError, KeyError, OSError) as exc:
            raise DataError(
                f"cannot read checkpoint {args.checkpoint}: {exc}"
            ) from exc
        if args.config is None:
            config = ckpt_config
        spec = model_param_spec(config)
        if [(n, tuple(s)) for n, s in spec] != [
            (n, tuple(i.shape)) for n, i in state.params.layout.items()
        ]:
            raise DataError("checkpoint layout does not match the active config")
        return state.params, config
    params = init_model_params(
        config, seeding.rng(args.seed, seeding.PARAMS), _dtype(config)
    )
    return params, config


def _load_episode_file(path):
    try:
        episodes, config = load_episodes(path)
    except FileNotFoundError as exc:
        raise DataError(f"episode file not found: {path}") from exc
    except (ValueError, KeyError, OSError) as exc:
        raise DataError(f"cannot read episodes from {path}: {exc}") from exc
    if not episodes:
        raise DataError(f"{path} contains no episodes")
    return episodes, config


def _emit(text: str, output: str | None) -> None:
    if output:
        with open(output, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------- handlers


def cmd_generate(args) -> int:
    config = _config(args)
    pool = ev.ScenePool(config, args.seed, args.scenes, stream=seeding.EVAL)
    episodes = pool.draw_many(args.count, args.difficulty)
    save_episodes(args.output, episodes, config)
    print(f"wrote {len(episodes)} {args.difficulty} episodes "
          f"over {args.scenes} scenes to {args.output}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _config(args)
    state = None
    if args.resume:
        try:
            state, config = load_checkpoint(args.resume)
        except FileNotFoundError as exc:
            raise DataError(f"checkpoint not found: {args.resume}") from exc
        except (ValueError, KeyError, OSError) as exc:
            raise DataError(f"cannot read checkpoint {args.resume}: {exc}") from exc

    def log(metrics):
        if metrics["step"] % max(1, args.log_every) == 0:
            print(json.dumps(metrics, sort_keys=True), flush=True)

    state = ev.train_model(
        config, args.seed, steps=args.steps, n_scenes=args.scenes,
        difficulty=args.difficulty, state=state, log=log,
    )
    save_checkpoint(args.output, state, config)
    print(f"saved step-{state.step} checkpoint to {args.output}", file=sys.stderr)
    return EXIT_OK


def cmd_localize(args) -> int:
    episodes, file_config = _load_episode_file(args.episodes)
    config = _config(args) if args.config else (file_config or _config(args))
    params, config = _params(args, config)
    if args.index is not None:
        if not 0 <= args.index < len(episodes):
            raise DataError(
                f"episode index {args.index} out of range 0..{len(episodes) - 1}"
            )
        episodes = [episodes[args.index]]
    results = ev.evaluate_episodes(
        params, episodes, config, args.seed,
        n_hypotheses=args.hypotheses, threads=args.threads,
    )
    print("episode\tdifficulty\terror_m\terror_deg\tscore\tangle_deg\tx\ty")
    for r in results:
        pose = r.pose if r.pose is not None else PoseSE2(0.0, [np.nan, np.nan])
        print(
            f"{r.episode}\t{r.difficulty}\t{r.error_m:.4f}\t{r.error_deg:.4f}"
            f"\t{r.score:.6f}\t{np.degrees(pose.angle):.3f}"
            f"\t{pose.t[0]:.4f}\t{pose.t[1]:.4f}"
        )
    if all(r.pose is None for r in results):
        print("every episode had only degenerate hypotheses", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _config(args)
    episodes = None
    if args.episodes:
        episodes, file_config = _load_episode_file(args.episodes)
        if args.config is None and file_config is not None:
            config = file_config
    params, config = _params(args, config)  # may adopt the checkpoint config
    if episodes is None:
        episodes = ev.evaluation_episodes(
            config, args.seed, args.count, args.difficulty, n_scenes=args.scenes
        )
    results = ev.evaluate_episodes(
        params, episodes, config, args.seed, threads=args.threads
    )
    thresholds = config.evaluation.recall_thresholds
    text = ev.render_metric_table(ev.recall_auc(results, thresholds), thresholds)
    if args.baseline:
        rates = ev.random_pose_baseline(episodes, config, args.seed, thresholds)
        cells = ["random_pose", str(len(episodes))]
        for pair in thresholds:
            cells += [f"{100 * rates[pair]:.1f}", ""]
        text += "\t".join(cells) + "\n"
    _emit(text, args.output)
    if args.curves:
        ev.export_recall_curves({"model": results}, args.curves)
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _config(args)
    try:
        seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    except ValueError as exc:
        raise DataError(f"bad --seeds {args.seeds!r}: {exc}") from exc
    if not seeds:
        raise DataError("need at least one seed")
    cells = ev.run_ablation(
        config, seeds, args.steps, n_scenes=args.scenes,
        n_eval=args.eval_count, eval_difficulty=args.difficulty,
        threads=args.threads,
    )
    thresholds = config.evaluation.recall_thresholds
    sys.stdout.write(ev.render_ablation_table(cells, thresholds))
    for name in ("no_occupancy", "avg_vertical", "multimodal_avg"):
        mean, std, _ = ev.paired_difference(cells, "full", name)
        if mean >= 0:
            verdict = "expected direction"
        elif len(seeds) > 1 and abs(mean) <= 2 * std:
            verdict = "reversed within seed noise"
        else:
            verdict = "reversed beyond 2 sigma"
        print(f"full - {name}: mean {mean:+.4f}, std {std:.4f} ({verdict})")
    return EXIT_OK


def cmd_probe(args) -> int:
    config = _config(args)
    params, config = _params(args, config)
    reports = {}
    label = "trained" if args.checkpoint else "untrained"
    reports[label] = ev.semantic_probe(
        params, config, args.seed, n_train=args.train_scenes,
        n_test=args.test_scenes, hidden=args.hidden, steps=args.steps,
    )
    if not args.no_control:
        control = init_model_params(
            config, seeding.rng(args.seed + 1, seeding.PARAMS), _dtype(config)
        )
        reports["random_frozen"] = ev.semantic_probe(
            control, config, args.seed, n_train=args.train_scenes,
            n_test=args.test_scenes, hidden=args.hidden, steps=args.steps,
        )
    if not all(r.frozen_checksum_ok for r in reports.values()):
        print("frozen parameters changed during probing", file=sys.stderr)
        return EXIT_NUMERIC
    sys.stdout.write(ev.render_probe_table(reports))
    return EXIT_OK


def cmd_export(args) -> int:
    config = _config(args)
    if not args.tile and not args.image:
        print("export: nothing to do (pass --tile and/or --image)",
              file=sys.stderr)
        return EXIT_USAGE
    if args.from_tile:
        nmap = read_tile(args.from_tile)
    else:
        params, config = _params(args, config)
        scene = generate_scene(config, args.scene_seed)
        reference = prepare_reference(
            scene, config, seeding.rng(args.scene_seed, seeding.APPEARANCE)
        )
        from .alignment import encode_reference

        with torch.no_grad():
            nmap = encode_reference(params, reference, config).detach()
    if args.tile:
        write_tile(nmap, args.tile, precision=args.tile_precision)
        print(f"wrote tile {args.tile}", file=sys.stderr)
    if args.image:
        ev.export_feature_image(nmap, args.image)
        print(f"wrote image {args.image}", file=sys.stderr)
    return EXIT_OK


def cmd_check_grad(args) -> int:
    config = _config(args)
    scene = generate_scene(config, args.seed)
    reference = prepare_reference(
        scene, config, seeding.rng(args.seed, seeding.APPEARANCE)
    )
    episode = sample_episode(
        scene, config, seeding.rng(args.seed, seeding.EPISODE),
        difficulty="easy", reference=reference,
    )
    params = init_model_params(
        config, seeding.rng(args.seed, seeding.PARAMS), torch.float64
    )
    report = check_gradients(
        params, episode, config, seed=args.seed,
        coords_per_slice=args.coords, tolerance=args.tolerance,
        n_negatives=args.negatives,
    )
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def main(argv=None) -> int:
    torch.set_num_threads(1)  # keep results independent of the host machine
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    try:
        return args.handler(args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except AlignmentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
