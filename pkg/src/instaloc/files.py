"""On-disk formats shared by the command-line tools.

* scans: labeled PLY with ``scan_id``, ``pose`` (tx ty tz r00..r22) and
  ``lidar`` (JSON) header comments;
* poses: CSV with columns scan_id, tx, ty, tz, r00..r22;
* instances: one labeled PLY per instance plus ``manifest.json``;
* triplets: ``anchors.ply``, ``positives.ply`` and ``negatives.ply`` whose
  ``instance`` column holds the triplet index, plus ``triplets.json``.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .geometry import Pose
from .plyio import PlyError, read_ply, write_ply
from .segmentation import ObjectInstance
from .simulator import LabeledScan, LidarConfig, TripletSample

POSE_COLUMNS = ["scan_id", "tx", "ty", "tz"] + [f"r{i}{j}" for i in range(3) for j in range(3)]


def _pose_values(pose: Pose) -> list[float]:
    return [float(v) for v in pose.translation] + [float(v) for v in pose.rotation.reshape(-1)]


def _pose_from_values(vals) -> Pose:
    vals = [float(v) for v in vals]
    return Pose(np.array(vals[3:12]).reshape(3, 3), vals[:3])


def write_scan(path, scan: LabeledScan) -> None:
    comments = {"scan_id": scan.scan_id,
                "pose": " ".join(repr(v) for v in _pose_values(scan.sensor_pose)),
                "lidar": json.dumps(scan.lidar.to_dict(), separators=(",", ":"))}
    write_ply(path, scan.points, scan.semantic, scan.instance, comments)


def read_scan(path, scan_id: int | None = None) -> LabeledScan:
    """Labeled scan from PLY; missing metadata falls back to defaults."""
    pts, props, comments = read_ply(path)
    if "semantic" not in props:
        raise PlyError(f"{path}: scan needs a 'semantic' property")
    inst = props.get("instance", np.zeros(len(pts), dtype=np.int64))
    pose = _pose_from_values(comments["pose"].split()) if "pose" in comments else Pose()
    lidar = LidarConfig.from_dict(json.loads(comments["lidar"])) if "lidar" in comments \
        else LidarConfig()
    sid = scan_id if scan_id is not None else int(comments.get("scan_id", 0))
    return LabeledScan(pts, props["semantic"], inst, pose, lidar, sid)


def write_poses(path, poses: dict) -> None:
    """``poses`` maps scan id to Pose; rows are written in id order."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(POSE_COLUMNS)
        for sid in sorted(poses):
            w.writerow([sid] + [repr(v) for v in _pose_values(poses[sid])])


def read_poses(path) -> dict:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(POSE_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing pose columns {sorted(missing)}")
        out = {}
        for row in reader:
            sid = int(row["scan_id"])
            if sid in out:
                raise ValueError(f"{path}: duplicate scan_id {sid}")
            out[sid] = _pose_from_values([row[c] for c in POSE_COLUMNS[1:]])
    return out


def scan_files(directory) -> list[Path]:
    files = sorted(Path(directory).glob("*.ply"))
    if not files:
        raise FileNotFoundError(f"no .ply scans in {directory}")
    return files


def write_instances(directory, instances) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for inst in instances:
        name = f"instance_{inst.instance_id:04d}.ply"
        write_ply(out / name, inst.points, np.full(len(inst), inst.semantic),
                  np.full(len(inst), inst.instance_id))
        manifest.append({"instance_id": inst.instance_id, "class": inst.semantic_class.label,
                         "semantic": inst.semantic, "centroid": [float(v) for v in inst.centroid],
                         "points": len(inst), "scan_id": inst.scan_id, "file": name})
    (out / "manifest.json").write_text(json.dumps({"instances": manifest}, indent=1))


def read_instances(directory) -> list[ObjectInstance]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())["instances"]
    out = []
    for m in manifest:
        pts, _, _ = read_ply(d / m["file"])
        out.append(ObjectInstance(pts, m["semantic"], m["scan_id"], m["instance_id"]))
    return out


_ROLES = ("anchors", "positives", "negatives")


def write_triplets(directory, triplets) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for role, attr in zip(_ROLES, ("anchor", "positive", "negative")):
        insts = [getattr(t, attr) for t in triplets]
        pts = np.vstack([i.points for i in insts]) if insts else np.zeros((0, 3))
        sem = np.concatenate([np.full(len(i), i.semantic) for i in insts]) if insts else []
        idx = np.concatenate([np.full(len(i), k) for k, i in enumerate(insts)]) if insts else []
        write_ply(out / f"{role}.ply", pts, sem, idx)
    meta = [{"anchor_object": t.anchor_object, "negative_object": t.negative_object,
             "anchor_pose": t.anchor_pose.to_dict(), "positive_pose": t.positive_pose.to_dict()}
            for t in triplets]
    (out / "triplets.json").write_text(json.dumps({"count": len(triplets), "triplets": meta}))


def read_triplets(directory) -> list[TripletSample]:
    d = Path(directory)
    meta = json.loads((d / "triplets.json").read_text())
    n = meta["count"]
    roles = []
    for role in _ROLES:
        pts, props, _ = read_ply(d / f"{role}.ply")
        idx = props["instance"]
        if len(idx) and (np.any(np.diff(idx) < 0) or idx[-1] >= n):
            raise PlyError(f"{d / role}.ply: triplet indices out of order or range")
        bounds = np.searchsorted(idx, np.arange(n + 1))
        insts = []
        for k in range(n):
            sl = slice(bounds[k], bounds[k + 1])
            if sl.start == sl.stop:
                raise PlyError(f"{d / role}.ply: triplet {k} has no points")
            insts.append(ObjectInstance(pts[sl], int(props["semantic"][sl.start]), 0, k))
        roles.append(insts)
    out = []
    for k, m in enumerate(meta["triplets"]):
        out.append(TripletSample(roles[0][k], roles[1][k], roles[2][k], m["anchor_object"],
                                 m["negative_object"], Pose.from_dict(m["anchor_pose"]),
                                 Pose.from_dict(m["positive_pose"])))
    return out
