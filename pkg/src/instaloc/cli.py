"""Command-line entry point: ``instaloc <subcommand> ...``.

Every subcommand accepts ``--config FILE`` (a JSON object whose keys provide
defaults for that subcommand's options; explicit flags win). For
``run-experiment`` and ``ablate-density`` the file is an experiment config.
Wall-clock timings never enter primary outputs; they go to ``*.timing.*``
sidecar files so that reruns are byte-identical.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

log = logging.getLogger("instaloc")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1) + "\n")


def _sidecar(path, suffix: str) -> Path:
    p = Path(path)
    stem = p.name[:-len("".join(p.suffixes))] if p.suffixes else p.name
    return p.with_name(stem + suffix)


def _engine(model):
    from .descriptor import load_engine
    if model and model != "geometric" and not Path(model).exists():
        raise FileNotFoundError(f"model file {model} not found")
    return load_engine(model)


# --------------------------------------------------------------------------
# subcommands

def cmd_simulate(args):
    from .experiment import offset_poses, poses_along, trajectory_path
    from .files import write_poses, write_scan, write_triplets
    from .simulator import (LidarConfig, SceneSpec, generate_scene, generate_triplets,
                            perturb_labels, raycast_scan)
    from .mapdb import subsample_by_spacing

    out = Path(args.out)
    lidar = LidarConfig(beams=args.beams, horizontal_resolution=args.azimuth_steps,
                        range_noise=args.range_noise)
    scene = generate_scene(args.seed, SceneSpec(rooms=args.rooms,
                                                furniture_per_room=args.furniture))
    out.mkdir(parents=True, exist_ok=True)
    (out / "scene.json").write_text(scene.to_json())
    path = trajectory_path(scene, args.seed)
    traj = poses_along(path, args.step)
    if args.max_scans is not None:
        traj = traj[:args.max_scans]
    rng = np.random.default_rng(args.seed)

    def dump(directory, poses, first_id):
        directory.mkdir(parents=True, exist_ok=True)
        table = {}
        for k, pose in enumerate(poses):
            sid = first_id + k
            scan = raycast_scan(scene, pose, lidar, seed=int(rng.integers(2**31)), scan_id=sid)
            if args.label_noise > 0:
                scan = perturb_labels(scan, args.label_noise, seed=int(rng.integers(2**31)))
            write_scan(directory / f"scan_{sid:04d}.ply", scan)
            table[sid] = pose
        write_poses(directory / "poses.csv", table)

    dump(out / "scans", traj, 0)
    if args.queries != "none":
        if args.queries == "offset":
            anchors = [traj[i] for i in subsample_by_spacing(traj, args.map_spacing)]
            qposes = [p for p in offset_poses(scene, anchors, args.query_offset, args.seed + 1)
                      if p is not None]
        else:
            qposes = poses_along(path, args.step, args.step / 2)
            if args.max_scans is not None:
                qposes = qposes[:args.max_scans]
        dump(out / "queries", qposes, 1000)
    if args.triplets:
        trip = generate_triplets(scene, lidar, args.triplets, args.seed + 2)
        write_triplets(out / "triplets", trip)
    print(f"simulate: {len(scene.objects)} objects, {len(traj)} scans -> {out}")


def cmd_segment(args):
    from .files import read_scan, write_instances
    from .segmentation import SegmentationParams, segment_instances

    scan = read_scan(args.scan)
    params = SegmentationParams.from_lidar(scan.lidar, voxel_size=args.voxel_size,
                                           alpha=args.alpha, min_points=args.min_points)
    instances = segment_instances(scan, params)
    write_instances(args.out, instances)
    print(f"segment: {len(instances)} instances -> {args.out}")


def cmd_train_descriptor(args):
    from .descriptor import EmbeddingModel, TrainConfig, train
    from .files import read_triplets

    triplets = read_triplets(args.triplets)
    model = EmbeddingModel.create(args.seed)
    cfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                      margin=args.margin, seed=args.seed)
    result = train(model, triplets, cfg)
    result.model.save(args.out)
    with open(_sidecar(args.out, ".loss.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "monitor_loss", "train_loss"])
        for e, loss in enumerate(result.loss_history):
            w.writerow([e, repr(loss), repr(result.batch_losses[e - 1]) if e else ""])
    print(f"train-descriptor: loss {result.loss_history[0]:.4f} -> "
          f"{result.loss_history[-1]:.4f} -> {args.out}")


def cmd_eval_descriptor(args):
    from .descriptor import best_f1_threshold, descriptor_pr_curve
    from .files import read_triplets

    curve = descriptor_pr_curve(_engine(args.model), read_triplets(args.triplets))
    Path(args.pr_out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.pr_out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["threshold", "precision", "recall"])
        for t, p, r in curve:
            w.writerow([repr(t), repr(p), repr(r)])
    t, p, r = best_f1_threshold(curve)
    if args.svg:
        _plot_pr(curve, (t, p, r), args.svg)
    print(f"eval-descriptor: best F1 at threshold {t:.4f}: precision {p:.3f}, recall {r:.3f}")


def _plot_pr(curve, best, path):
    try:
        import matplotlib
    except ImportError as exc:
        raise RuntimeError("--svg needs matplotlib (pip install matplotlib)") from exc
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "instaloc"
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot([c[2] for c in curve], [c[1] for c in curve], lw=1.5)
    ax.plot([best[2]], [best[1]], "o", color="C3")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _seg_params(args, lidar):
    from .segmentation import SegmentationParams
    return SegmentationParams.from_lidar(lidar, voxel_size=args.voxel_size, alpha=args.alpha,
                                         min_points=args.min_points)


def cmd_build_map(args):
    from .files import read_poses, read_scan, scan_files
    from .mapdb import build_map, save_map

    scans = [read_scan(f) for f in scan_files(args.scans)]
    poses = read_poses(args.poses)
    missing = [s.scan_id for s in scans if s.scan_id not in poses]
    if missing:
        raise ValueError(f"no pose for scan ids {missing[:5]}")
    scans.sort(key=lambda s: s.scan_id)
    imap = build_map(scans, _seg_params(args, scans[0].lidar), _engine(args.model),
                     args.spacing, poses=[poses[s.scan_id] for s in scans],
                     store_points=not args.centroids_only)
    save_map(imap, args.out)
    print(f"build-map: {len(imap.scan_poses)} scans, {len(imap)} instances -> {args.out}")


def _match_setup(args, imap):
    from .matching import MatchParams
    from .segmentation import SegmentationParams

    params = json.loads(Path(args.params).read_text()) if args.params else {}
    seg = dict(imap.metadata.get("segmentation", {}))
    seg.update(params.pop("segmentation", {}))
    engine = _engine(args.model)
    expected = imap.metadata.get("descriptor")
    if expected and expected != engine.to_dict():
        raise ValueError(f"descriptor engine {engine.to_dict()} does not match the map's "
                         f"{expected}; pass the model used to build the map")
    return SegmentationParams(**seg), engine, MatchParams(**params)


def cmd_localize(args):
    from .files import read_scan
    from .mapdb import load_map
    from .matching import localize

    imap = load_map(args.map)
    seg, engine, params = _match_setup(args, imap)
    t0 = time.perf_counter()
    res = localize(read_scan(args.scan), imap, seg, engine, params)
    wall = (time.perf_counter() - t0) * 1e3
    _write_json(args.out, res.to_dict(imap))
    _write_json(_sidecar(args.out, ".timing.json"), {"stages_ms": res.timings_ms,
                                                     "wall_ms": wall})
    print(f"localize: {res.status}, {len(res.inliers)} inliers, {wall:.0f} ms")


def cmd_evaluate(args):
    from .files import POSE_COLUMNS, read_poses, read_scan, scan_files
    from .mapdb import load_map
    from .matching import localize, score_results

    imap = load_map(args.map)
    seg, engine, params = _match_setup(args, imap)
    truth = read_poses(args.truth)
    scans = sorted((read_scan(f) for f in scan_files(args.queries)), key=lambda s: s.scan_id)
    scans = [s for s in scans if s.scan_id in truth]
    if not scans:
        raise ValueError("no query scan has a ground-truth pose")
    results, walls = [], []
    for s in scans:
        t0 = time.perf_counter()
        results.append(localize(s, imap, seg, engine, params))
        walls.append((time.perf_counter() - t0) * 1e3)
    rep = score_results(results, [truth[s.scan_id] for s in scans],
                        query_ids=[s.scan_id for s in scans])
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    with open(args.report, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scan_id", "status", "translation_error", "rotation_error", "correct",
                    "inliers"] + ["est_" + c for c in POSE_COLUMNS[1:]])
        for rec, res in zip(rep.records, results):
            est = [""] * 12 if res.pose is None else \
                [repr(float(v)) for v in (*res.pose.translation, *res.pose.rotation.reshape(-1))]
            w.writerow([rec["query"], rec["status"], repr(rec["translation_error"]),
                        repr(rec["rotation_error"]), int(rec["correct"]), rec["inliers"]] + est)
    _write_json(_sidecar(args.report, ".summary.json"), rep.summary())
    stages = ["segment", "describe", "propose", "group", "ransac"]
    with open(_sidecar(args.report, ".timing.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["scan_id"] + [s + "_ms" for s in stages] + ["wall_ms"])
        for s, res, wall in zip(scans, results, walls):
            w.writerow([s.scan_id] + [f"{res.timings_ms.get(k, 0.0):.3f}" for k in stages]
                       + [f"{wall:.3f}"])
    print(f"evaluate: recall {rep.recall:.3f}, precision {rep.precision:.3f} "
          f"({rep.correct}/{rep.detections} correct of {rep.queries} queries)")


def _experiment_config(args):
    from .experiment import ExperimentConfig
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    over = {}
    if args.seed is not None:
        over.update(seed=args.seed, scene_seed=args.seed)
    if args.out:
        over["output_dir"] = str(args.out)
    return replace(cfg, **over)


def cmd_run_experiment(args):
    from .experiment import run_experiment
    rep = run_experiment(_experiment_config(args))
    print(f"run-experiment: recall {rep.recall:.3f}, precision {rep.precision:.3f}, "
          f"{rep.queries} queries against {rep.map_scans} map scans -> {args.out}")


def cmd_ablate_density(args):
    from .experiment import density_ablation
    rows = density_ablation(_experiment_config(args), args.spacings)
    for r in rows:
        print(f"spacing {r['spacing']:.2f}: {r['map_scans']} scans, recall {r['recall']:.3f}, "
              f"precision {r['precision']:.3f}")


# --------------------------------------------------------------------------
# parser

def _seg_options(p):
    p.add_argument("--voxel-size", type=float, default=0.02)
    p.add_argument("--alpha", type=float, default=4.0)
    p.add_argument("--min-points", type=int, default=50)


def _match_options(p):
    p.add_argument("--map", required=True)
    p.add_argument("--model", default="geometric",
                   help="embedding model JSON, or 'geometric' (default)")
    p.add_argument("--params", help="JSON with match parameters and optional 'segmentation'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="instaloc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="JSON file with option defaults")
        p.set_defaults(func=fn)
        return p

    p = add("simulate", cmd_simulate, "generate a scene, trajectory scans and triplets")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rooms", type=int, default=3)
    p.add_argument("--furniture", type=int, default=10, help="objects per room")
    p.add_argument("--out", required=True)
    p.add_argument("--step", type=float, default=0.7, help="trajectory step (m)")
    p.add_argument("--max-scans", type=int)
    p.add_argument("--beams", type=int, default=128)
    p.add_argument("--azimuth-steps", type=int, default=512)
    p.add_argument("--range-noise", type=float, default=0.01)
    p.add_argument("--label-noise", type=float, default=0.0)
    p.add_argument("--queries", choices=["none", "offset", "midpoint"], default="none")
    p.add_argument("--map-spacing", type=float, default=2.1,
                   help="spacing of the anchors used for offset queries")
    p.add_argument("--query-offset", type=float, default=0.7)
    p.add_argument("--triplets", type=int, default=0, help="number of training triplets")

    p = add("segment", cmd_segment, "split a labeled scan into object instances")
    p.add_argument("--scan", required=True)
    p.add_argument("--out", required=True)
    _seg_options(p)

    p = add("train-descriptor", cmd_train_descriptor, "train the embedding model on triplets")
    p.add_argument("--triplets", required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--margin", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("eval-descriptor", cmd_eval_descriptor, "precision/recall of descriptor matching")
    p.add_argument("--model", default="geometric")
    p.add_argument("--triplets", required=True)
    p.add_argument("--pr-out", required=True)
    p.add_argument("--svg", help="also write a precision/recall plot")

    p = add("build-map", cmd_build_map, "build an instance map from registered scans")
    p.add_argument("--scans", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--spacing", type=float, default=2.1)
    p.add_argument("--model", default="geometric")
    p.add_argument("--out", required=True)
    p.add_argument("--centroids-only", action="store_true",
                   help="store instance centroids instead of full point sets")
    _seg_options(p)

    p = add("localize", cmd_localize, "localize one scan against a map")
    _match_options(p)
    p.add_argument("--scan", required=True)
    p.add_argument("--out", required=True)

    p = add("evaluate", cmd_evaluate, "localize a directory of scans and score them")
    _match_options(p)
    p.add_argument("--queries", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--report", required=True)

    p = add("run-experiment", cmd_run_experiment, "simulate, map, localize and score")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = add("ablate-density", cmd_ablate_density, "recall/precision against map spacing")
    p.add_argument("--spacings", type=float, nargs="+", default=[1.5, 2.1, 3.0])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    return parser


_EXPERIMENT_COMMANDS = {"run-experiment", "ablate-density"}


def _config_path(argv):
    for k, tok in enumerate(argv):
        if tok == "--config" and k + 1 < len(argv):
            return argv[k + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv):
    """Parse ``argv``; a ``--config`` file supplies defaults, including required options."""
    parser = build_parser()
    argv = list(argv)
    command = next((t for t in argv if not t.startswith("-")), None)
    config = _config_path(argv)
    subs = parser._subparsers._group_actions[0].choices
    if config and command in subs and command not in _EXPERIMENT_COMMANDS:
        try:
            defaults = json.loads(Path(config).read_text())
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read --config {config}: {exc}")
        if not isinstance(defaults, dict):
            parser.error("--config must hold a JSON object")
        sub = subs[command]
        defaults = {k.replace("-", "_"): v for k, v in defaults.items()}
        known = {a.dest: a for a in sub._actions}
        unknown = sorted(set(defaults) - set(known) - {"help", "config", "func"})
        if unknown or {"help", "config", "func"} & set(defaults):
            parser.error(f"unknown keys in --config: {', '.join(unknown) or 'reserved key'}")
        for k in defaults:
            known[k].required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # report with the failing stage, never a bare traceback
        stage = getattr(exc, "stage", args.command)
        print(f"instaloc: [{stage}] error: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
