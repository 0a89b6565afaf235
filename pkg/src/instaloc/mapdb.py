"""Prior-map instance database: build, query, save and load."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .geometry import Pose
from .plyio import read_ply, write_ply
from .segmentation import ObjectInstance, SegmentationParams, segment_instances

MAP_FORMAT = "instaloc-map"
MAP_FORMAT_VERSION = 1


class MapFileError(ValueError):
    """Unreadable map file."""


class MapVersionError(MapFileError):
    pass


class MapTruncatedError(MapFileError):
    pass


@dataclass(frozen=True, eq=False)
class MapEntry:
    """One described instance; ``instance`` points and centroid are in the map frame."""

    instance: ObjectInstance
    descriptor: np.ndarray
    scan_pose: Pose
    scan_index: int

    def __post_init__(self):
        d = np.array(self.descriptor, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(d)):
            raise ValueError("descriptor entries must be finite")
        d.setflags(write=False)
        object.__setattr__(self, "descriptor", d)

    @property
    def centroid(self) -> np.ndarray:
        return self.instance.centroid

    @property
    def semantic(self) -> int:
        return self.instance.semantic

    def __eq__(self, other):
        if not isinstance(other, MapEntry):
            return NotImplemented
        return (self.instance == other.instance and self.scan_pose == other.scan_pose
                and self.scan_index == other.scan_index
                and np.array_equal(self.descriptor, other.descriptor))


@dataclass(frozen=True, eq=False)
class InstanceMap:
    entries: tuple
    dim: int
    scan_poses: tuple = ()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "scan_poses", tuple(self.scan_poses))
        for e in self.entries:
            if len(e.descriptor) != self.dim:
                raise ValueError("descriptor dimension differs from the map dimension")
            if not 0 <= e.scan_index < max(1, len(self.scan_poses)) and self.scan_poses:
                raise ValueError("entry refers to an unknown scan index")

    def __len__(self):
        return len(self.entries)

    @cached_property
    def descriptors(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, self.dim))
        return np.stack([e.descriptor for e in self.entries])

    @cached_property
    def centroids(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 3))
        return np.stack([e.centroid for e in self.entries])

    @cached_property
    def semantics(self) -> np.ndarray:
        return np.array([e.semantic for e in self.entries], dtype=np.int64)

    @cached_property
    def scan_indices(self) -> np.ndarray:
        return np.array([e.scan_index for e in self.entries], dtype=np.int64)

    def __eq__(self, other):
        if not isinstance(other, InstanceMap):
            return NotImplemented
        return (self.dim == other.dim and self.metadata == other.metadata
                and self.scan_poses == other.scan_poses and self.entries == other.entries)


def subsample_by_spacing(poses, spacing: float) -> list[int]:
    """Greedy: keep the first pose, then each pose at least ``spacing`` from the last kept one."""
    if spacing < 0:
        raise ValueError("spacing must be non-negative")
    kept = []
    for i, p in enumerate(poses):
        if not kept or np.linalg.norm(p.translation - poses[kept[-1]].translation) >= spacing:
            kept.append(i)
    return kept


def build_map(scans, seg_params: SegmentationParams, engine, spacing: float = 0.0,
              poses=None, store_points: bool = True, metadata: dict | None = None,
              segmenter=None) -> InstanceMap:
    """Segment and describe the spaced-out subset of registered scans.

    Args:
        scans: labeled scans; their ``sensor_pose`` registers them in the map
            frame unless ``poses`` overrides it.
        seg_params: segmentation parameters.
        engine: descriptor engine with ``describe`` and ``dim``.
        spacing: minimum distance between consecutive kept scans (metres).
        segmenter: optional ``scan -> instances`` callable replacing
            ``segment_instances(scan, seg_params)``, e.g. to reuse cached results.
    """
    segmenter = segmenter or (lambda scan: segment_instances(scan, seg_params))
    scans = list(scans)
    poses = [s.sensor_pose for s in scans] if poses is None else list(poses)
    kept = subsample_by_spacing(poses, spacing)
    entries, kept_poses = [], []
    for scan_index, i in enumerate(kept):
        instances = segmenter(scans[i])
        kept_poses.append(poses[i])
        if not instances:
            continue
        desc = engine.describe(instances)
        for inst, d in zip(instances, desc):
            world = inst.transformed(poses[i])
            if not store_points:
                world = ObjectInstance(world.centroid[None, :], inst.semantic, inst.scan_id,
                                       inst.instance_id)
            entries.append(MapEntry(world, d, poses[i], scan_index))
    meta = {"spacing": spacing, "source_scans": [int(scans[i].scan_id) for i in kept],
            "segmentation": seg_params.to_dict(), "descriptor": engine.to_dict()}
    meta.update(metadata or {})
    return InstanceMap(entries, engine.dim, kept_poses, meta)


def knn_query(imap: InstanceMap, query, n: int, mask=None):
    """The ``n`` entries nearest to ``query`` in descriptor space.

    Returns ``(indices, distances)`` sorted by distance, then scan index, then
    entry order. ``mask`` optionally restricts the search to some entries.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    diff = imap.descriptors - q
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    idx = np.arange(len(imap.entries))
    if mask is not None:
        idx = idx[np.asarray(mask, dtype=bool)]
    order = np.lexsort((idx, imap.scan_indices[idx], dist[idx]))[:n]
    return idx[order], dist[idx[order]]


# --------------------------------------------------------------------------
# persistence

def _instance_points_name(path: Path, k: int) -> str:
    return f"{path.name}.points/entry_{k:05d}.ply"


def save_map(imap: InstanceMap, path, externalize_above: int = 5000) -> None:
    """Write a map as one JSON document; large point sets go to sibling PLY files."""
    path = Path(path)
    entries = []
    for k, e in enumerate(imap.entries):
        inst = e.instance
        rec = {"scan_index": e.scan_index, "instance_id": inst.instance_id,
               "source_scan_id": inst.scan_id, "semantic": inst.semantic,
               "centroid": inst.centroid.tolist(), "descriptor": e.descriptor.tolist()}
        if len(inst.points) > externalize_above:
            rel = _instance_points_name(path, k)
            (path.parent / rel).parent.mkdir(parents=True, exist_ok=True)
            write_ply(path.parent / rel, inst.points)
            rec["points_file"] = rel
            rec["point_count"] = len(inst.points)
        else:
            rec["points"] = inst.points.tolist()
        entries.append(rec)
    doc = {"format": MAP_FORMAT, "version": MAP_FORMAT_VERSION, "descriptor_dim": imap.dim,
           "metadata": imap.metadata, "scan_poses": [p.to_dict() for p in imap.scan_poses],
           "entries": entries}
    path.write_text(json.dumps(doc))


def load_map(path) -> InstanceMap:
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MapTruncatedError(f"{path}: truncated or corrupt map file ({exc.msg})") from None
    if not isinstance(doc, dict) or doc.get("format") != MAP_FORMAT:
        raise MapFileError(f"{path}: not an instance map file")
    version = doc.get("version")
    if version != MAP_FORMAT_VERSION:
        raise MapVersionError(f"{path}: map format version {version!r}, "
                              f"this build reads version {MAP_FORMAT_VERSION}")
    try:
        poses = [Pose.from_dict(p) for p in doc["scan_poses"]]
        entries = []
        for rec in doc["entries"]:
            if "points_file" in rec:
                pts, _, _ = read_ply(path.parent / rec["points_file"])
                if len(pts) != rec["point_count"]:
                    raise MapTruncatedError(f"{rec['points_file']}: point count mismatch")
            else:
                pts = np.array(rec["points"], dtype=np.float64).reshape(-1, 3)
            inst = ObjectInstance(pts, rec["semantic"], rec["source_scan_id"], rec["instance_id"])
            if not np.array_equal(inst.centroid, np.array(rec["centroid"])):
                # recomputed means stay bit-identical for the same points
                raise MapFileError(f"{path}: stored centroid disagrees with its points")
            idx = int(rec["scan_index"])
            entries.append(MapEntry(inst, rec["descriptor"], poses[idx], idx))
        return InstanceMap(entries, int(doc["descriptor_dim"]), poses, doc["metadata"])
    except (KeyError, IndexError, TypeError) as exc:
        raise MapFileError(f"{path}: malformed map file ({exc})") from None


def map_entry_count_by_scan(imap: InstanceMap) -> dict:
    counts = {}
    for e in imap.entries:
        counts[e.scan_index] = counts.get(e.scan_index, 0) + 1
    return counts


