"""Reproducible end-to-end experiments on simulated scenes."""
from __future__ import annotations

import csv
import io
import json
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components, dijkstra

from .descriptor import load_engine
from .geometry import Pose, rot_z
from .mapdb import build_map, subsample_by_spacing
from .matching import MatchParams, localize_instances, score_results
from .segmentation import SegmentationParams, segment_instances
from .simulator import (SENSOR_HEIGHT, LidarConfig, SceneSpec, _floor_obstacles,
                        generate_scene, is_free, perturb_labels, raycast_scan)

QUERY_MODES = ("midpoint", "offset", "self")


class ExperimentError(RuntimeError):
    """An experiment stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class ExperimentConfig:
    scene_seed: int = 0
    rooms: int = 3
    furniture_per_room: int = 10
    lidar: dict = field(default_factory=lambda: LidarConfig().to_dict())
    segmentation: dict = field(default_factory=lambda: {"voxel_size": 0.02, "alpha": 4.0,
                                                        "min_points": 50})
    descriptor: str = "geometric"  # or a path to a trained model file
    match: dict = field(default_factory=lambda: MatchParams().to_dict())
    map_spacing: float = 2.1
    query_mode: str = "midpoint"
    query_offset: float = 0.7
    queries_per_anchor: int = 1
    trajectory_step: float = 0.7
    waypoints_per_room: int = 3
    label_noise: float = 0.0
    seed: int = 0
    output_dir: str | None = None

    def __post_init__(self):
        # partial sub-dicts fill in from the defaults
        defaults = {"lidar": LidarConfig().to_dict(), "match": MatchParams().to_dict(),
                    "segmentation": {"voxel_size": 0.02, "alpha": 4.0, "min_points": 50}}
        for k, base in defaults.items():
            object.__setattr__(self, k, {**base, **getattr(self, k)})
        if self.query_mode not in QUERY_MODES:
            raise ValueError(f"query_mode must be one of {QUERY_MODES}")
        if self.queries_per_anchor < 1:
            raise ValueError("queries_per_anchor must be positive")
        if self.map_spacing < 0 or self.trajectory_step <= 0 or not 0 <= self.label_noise <= 1:
            raise ValueError("invalid spacing, step or label noise")
        if self.descriptor != "geometric" and not Path(self.descriptor).exists():
            raise ValueError(f"descriptor model {self.descriptor!r} not found")

    def lidar_config(self) -> LidarConfig:
        return LidarConfig.from_dict(self.lidar)

    def seg_params(self) -> SegmentationParams:
        return SegmentationParams.from_lidar(self.lidar_config(), **self.segmentation)

    def match_params(self) -> MatchParams:
        return MatchParams(**self.match)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        merged = {}
        for k, v in d.items():
            if k not in cls.__dataclass_fields__:
                raise ValueError(f"unknown experiment config key {k!r}")
            merged[k] = v
        return cls(**merged)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def free_space_grid(scene, resolution: float = 0.1, clearance: float = 0.35):
    """Boolean grid of sensor positions clear of furniture, doorways included.

    Returns ``(free, xs, ys)`` with ``free[i, j]`` describing ``(xs[i], ys[j])``.
    """
    xs = np.arange(scene.bounds_lo[0], scene.bounds_hi[0], resolution) + resolution / 2
    ys = np.arange(scene.bounds_lo[1], scene.bounds_hi[1], resolution) + resolution / 2
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    inside = np.zeros(X.shape, bool)
    for r in scene.rooms:
        inside |= ((X >= r.lo[0] + clearance) & (X <= r.hi[0] - clearance)
                   & (Y >= r.lo[1] + clearance) & (Y <= r.hi[1] - clearance))
    for lo, hi in _floor_obstacles(scene):
        inside &= ~((X >= lo[0] - clearance) & (X <= hi[0] + clearance)
                    & (Y >= lo[1] - clearance) & (Y <= hi[1] + clearance))
    for dx, dy in scene.doors:
        inside |= (np.abs(X - dx) <= 0.8) & (np.abs(Y - dy) <= _DOOR_HALF_PASSAGE)
    return inside, xs, ys


_DOOR_HALF_PASSAGE = 0.3  # half width of the walkable strip through a doorway


def _grid_graph(free):
    nx_, ny_ = free.shape
    idx = -np.ones(free.shape, dtype=np.int64)
    idx[free] = np.arange(int(free.sum()))
    rows, cols, w = [], [], []
    for di, dj in ((1, 0), (0, 1), (1, 1), (1, -1)):
        a = idx[max(0, -di):nx_ - max(0, di), max(0, -dj):ny_ - max(0, dj)]
        b = idx[max(0, di):nx_ - max(0, -di) or None, max(0, dj):ny_ - max(0, -dj) or None]
        ok = (a >= 0) & (b >= 0)
        rows.append(a[ok])
        cols.append(b[ok])
        w.append(np.full(int(ok.sum()), math.hypot(di, dj)))
    n = int(free.sum())
    g = coo_matrix((np.concatenate(w), (np.concatenate(rows), np.concatenate(cols))),
                   shape=(n, n)).tocsr()
    return g, idx


def trajectory_path(scene, seed: int, waypoints_per_room: int = 3, clearance: float = 0.25,
                    resolution: float = 0.1) -> np.ndarray:
    """Collision-free polyline (K, 2) visiting every room in order.

    Random waypoints are drawn in the free space of each room and joined by
    grid shortest paths, which pass through the doorways.
    """
    rng = np.random.default_rng(seed)
    free, xs, ys = free_space_grid(scene, resolution, clearance)
    graph, idx = _grid_graph(free)
    cells = np.argwhere(free)
    # keep the largest connected region so every waypoint is reachable
    _, comp = connected_components(graph, directed=False)
    main = np.bincount(comp).argmax()
    x, y = xs[cells[:, 0]], ys[cells[:, 1]]
    goals = []
    for room in scene.rooms:
        cand = np.flatnonzero((comp == main) & (x > room.lo[0]) & (x < room.hi[0])
                              & (y > room.lo[1]) & (y < room.hi[1]))
        if len(cand):
            goals += list(rng.choice(cand, size=min(waypoints_per_room, len(cand)),
                                     replace=False))
    if not goals:
        raise RuntimeError("scene has no free space for a trajectory")
    path = [goals[0]]
    for a, b in zip(goals[:-1], goals[1:]):
        _, pred = dijkstra(graph, directed=False, indices=a, return_predecessors=True)
        seg = [b]
        while seg[-1] != a:
            seg.append(pred[seg[-1]])
        path += seg[::-1][1:]
    return np.column_stack([x[path], y[path]])


def poses_along(path: np.ndarray, step: float, phase: float = 0.0,
                height: float = SENSOR_HEIGHT) -> list[Pose]:
    """Poses every ``step`` metres of arc length from ``phase``, facing along the path."""
    seg = np.diff(path, axis=0)
    length = np.linalg.norm(seg, axis=1)
    keep = length > 0
    seg, length = seg[keep], length[keep]
    starts = np.concatenate([[0.0], np.cumsum(length)])
    if len(seg) == 0:
        return [Pose(np.eye(3), (path[0, 0], path[0, 1], height))]
    out = []
    for s in np.arange(phase, starts[-1] + 1e-9, step):
        k = min(int(np.searchsorted(starts, s, side="right")) - 1, len(seg) - 1)
        xy = path[:-1][keep][k] + (s - starts[k]) / length[k] * seg[k]
        out.append(Pose(rot_z(math.atan2(seg[k, 1], seg[k, 0])), (xy[0], xy[1], height)))
    return out


def generate_trajectory(scene, step: float, seed: int, waypoints_per_room: int = 3,
                        height: float = SENSOR_HEIGHT, phase: float = 0.0) -> list[Pose]:
    """Sensor poses every ``step`` metres along a random collision-free walk.

    Consecutive poses are ``step`` apart along the walk; sensor yaw follows
    the walking direction.
    """
    path = trajectory_path(scene, seed, waypoints_per_room)
    return poses_along(path, step, phase, height)


def offset_poses(scene, anchors, offset: float, seed: int, height: float = SENSOR_HEIGHT):
    """One pose per anchor, ``offset`` metres away horizontally, with a random yaw."""
    rng = np.random.default_rng(seed)
    obstacles = _floor_obstacles(scene)
    out = []
    for a in anchors:
        for _ in range(200):
            phi = rng.uniform(-math.pi, math.pi)
            xy = a.translation[:2] + offset * np.array([math.cos(phi), math.sin(phi)])
            if is_free(scene, xy, 0.35, obstacles):
                out.append(Pose(rot_z(rng.uniform(-math.pi, math.pi)), (xy[0], xy[1], height)))
                break
        else:
            out.append(None)
    return out


class _World:
    """Scene, trajectory and cached scans/instances shared across runs."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.lidar = cfg.lidar_config()
        self.seg = cfg.seg_params()
        try:
            self.scene = generate_scene(cfg.scene_seed, SceneSpec(rooms=cfg.rooms,
                                                                  furniture_per_room=cfg.furniture_per_room))
        except Exception as exc:
            raise ExperimentError("simulate", str(exc)) from exc
        try:
            self.path = trajectory_path(self.scene, cfg.seed, cfg.waypoints_per_room)
        except RuntimeError as exc:
            raise ExperimentError("trajectory", str(exc)) from exc
        self.trajectory = poses_along(self.path, cfg.trajectory_step)
        self._scans = {}
        self._instances = {}
        self._seg_ms = {}

    def scan(self, key, pose: Pose):
        if key not in self._scans:
            seed = (zlib.crc32(repr(key).encode()) + self.cfg.seed) & 0x7FFFFFFF
            scan = raycast_scan(self.scene, pose, self.lidar, seed=seed, scan_id=len(self._scans))
            if self.cfg.label_noise > 0:
                scan = perturb_labels(scan, self.cfg.label_noise, seed=seed + 1)
            self._scans[key] = scan
        return self._scans[key]

    def instances(self, key, pose: Pose):
        if key not in self._instances:
            scan = self.scan(key, pose)
            t0 = time.perf_counter()
            self._instances[key] = segment_instances(scan, self.seg)
            self._seg_ms[key] = (time.perf_counter() - t0) * 1e3
        return self._instances[key]


@dataclass
class ExperimentReport:
    recall: float
    precision: float
    detections: int
    queries: int
    map_scans: int
    map_entries: int
    records: list
    timing: dict
    config: dict
    precision_undefined: bool = False

    def records_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["query", "status", "translation_error", "rotation_error", "correct",
                    "inliers", "gt_tx", "gt_ty", "gt_tz"])
        for r in self.records:
            w.writerow([r["query"], r["status"], _fmt(r["translation_error"]),
                        _fmt(r["rotation_error"]), int(r["correct"]), r["inliers"],
                        *(_fmt(v) for v in r["truth"])])
        return buf.getvalue()

    def summary(self, timing: bool = False) -> dict:
        d = {"recall": self.recall, "precision": self.precision,
             "precision_undefined": self.precision_undefined,
             "detections": self.detections, "queries": self.queries,
             "map_scans": self.map_scans, "map_entries": self.map_entries,
             "config": self.config}
        if timing:
            d["timing"] = self.timing
        return d

    def write(self, out_dir) -> None:
        """report.csv and report.json are deterministic; timing goes to sidecar files."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.records_csv())
        (out / "report.json").write_text(json.dumps(self.summary(), indent=1))
        (out / "timing.json").write_text(json.dumps(self.timing, indent=1))
        with open(out / "timing.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            stages = ["segment", "describe", "propose", "group", "ransac", "wall"]
            w.writerow(["query"] + [f"{s}_ms" for s in stages])
            for r in self.records:
                w.writerow([r["query"]] + [f"{r['timings'].get(s, 0.0):.3f}" for s in stages])
        (out / "config.json").write_text(json.dumps(self.config, indent=1))


def _fmt(v) -> str:
    return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def _query_poses(world: _World, cfg: ExperimentConfig, kept: list[int]):
    traj = world.trajectory
    if cfg.query_mode == "self":
        return [(("traj", i), traj[i]) for i in kept]
    if cfg.query_mode == "midpoint":
        mids = poses_along(world.path, cfg.trajectory_step, cfg.trajectory_step / 2)
        return [(("mid", i), p) for i, p in enumerate(mids)]
    out = []
    for j in range(cfg.queries_per_anchor):
        poses = offset_poses(world.scene, [traj[i] for i in kept], cfg.query_offset,
                             cfg.seed + 7919 * (j + 1))
        out += [(("off", i, j, cfg.map_spacing), p) for i, p in zip(kept, poses) if p is not None]
    return out


def _run(world: _World, cfg: ExperimentConfig) -> ExperimentReport:
    engine = load_engine(cfg.descriptor)
    params = cfg.match_params()
    traj = world.trajectory
    kept = subsample_by_spacing(traj, cfg.map_spacing)
    map_scans = [world.scan(("traj", i), traj[i]) for i in kept]
    key_of = {id(s): ("traj", i) for s, i in zip(map_scans, kept)}
    try:
        imap = build_map(map_scans, world.seg, engine, 0.0,
                         segmenter=lambda s: world.instances(key_of[id(s)], s.sensor_pose),
                         store_points=False, metadata={"scene_seed": cfg.scene_seed})
    except Exception as exc:
        raise ExperimentError("build-map", str(exc)) from exc
    results, truths, ids = [], [], []
    for k, (key, pose) in enumerate(_query_poses(world, cfg, kept)):
        instances = world.instances(key, pose)
        timings = {"segment": world._seg_ms[key]}
        t1 = time.perf_counter()
        desc = engine.describe(instances)
        timings["describe"] = (time.perf_counter() - t1) * 1e3
        res = localize_instances(instances, desc, imap, params, timings)
        # segmentation may come from the cache, so count its measured time instead
        wall = (time.perf_counter() - t1) * 1e3 + timings["segment"]
        results.append((res, wall))
        truths.append(pose)
        ids.append(k)
    report = score_results([r for r, _ in results], truths, query_ids=ids)
    for rec, (r, wall), t in zip(report.records, results, truths):
        rec["timings"] = dict(r.timings_ms, wall=wall)
        rec["truth"] = list(t.translation)
    stage_names = ["segment", "describe", "propose", "group", "ransac"]
    timing = {s: {"mean_ms": float(np.mean([rec["timings"][s] for rec in report.records]))
                  if report.records else 0.0} for s in stage_names}
    return ExperimentReport(report.recall, report.precision, report.detections, report.queries,
                            len(kept), len(imap), report.records, timing,
                            # where the files go does not change them
                            replace(cfg, output_dir=None).to_dict(),
                            report.no_detections)


def run_experiment(config: ExperimentConfig, _world: _World | None = None) -> ExperimentReport:
    """Simulate, map, localize and score one configuration; writes reports if ``output_dir`` is set."""
    world = _world or _World(config)
    report = _run(world, config)
    if config.output_dir:
        report.write(config.output_dir)
    return report


def density_ablation(config: ExperimentConfig, spacings) -> list[dict]:
    """One experiment per map spacing over the same scene, trajectory and queries."""
    spacings = list(spacings)
    if len(spacings) < 2:
        raise ValueError("density ablation needs at least two spacings")
    world = _World(replace(config, output_dir=None))
    rows = []
    for s in spacings:
        rep = _run(world, replace(config, map_spacing=float(s), output_dir=None))
        rows.append({"spacing": float(s), "map_scans": rep.map_scans, "map_entries": rep.map_entries,
                     "queries": rep.queries, "detections": rep.detections,
                     "recall": rep.recall, "precision": rep.precision})
    if config.output_dir:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(ablation_csv(rows))
    return rows


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["spacing", "map_scans", "map_entries", "queries", "detections", "recall", "precision"]
    w.writerow(cols)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
    return buf.getvalue()
