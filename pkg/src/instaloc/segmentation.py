"""Instance segmentation of labeled lidar scans.

Points are voxel-downsampled, partitioned by semantic class, and grouped by
single-linkage connectivity under a range-adaptive radius: a point at range
``d`` from the sensor links to neighbours within
``alpha * d * tan(vfov / beams)``, i.e. a fixed multiple of the vertical gap
between adjacent beams at that range.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import PointCloud
from .labels import NUM_CLASSES, SemanticClass


@dataclass(frozen=True)
class SegmentationParams:
    voxel_size: float = 0.02
    alpha: float = 4.0
    min_points: int = 50
    beams: int = 128
    vfov: float = math.pi / 2
    # overrides the range-dependent radius with a constant (classic Euclidean clustering)
    fixed_radius: float | None = None

    def __post_init__(self):
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.min_points < 1:
            raise ValueError("min_points must be at least 1")
        if self.beams < 2 or not 0 < self.vfov < math.pi:
            raise ValueError("invalid lidar beam layout")

    @classmethod
    def from_lidar(cls, lidar, **kwargs) -> "SegmentationParams":
        return cls(beams=lidar.beams, vfov=lidar.vfov, **kwargs)

    def to_dict(self) -> dict:
        return {"voxel_size": self.voxel_size, "alpha": self.alpha,
                "min_points": self.min_points, "beams": self.beams, "vfov": self.vfov,
                "fixed_radius": self.fixed_radius}


@dataclass(frozen=True, eq=False)
class ObjectInstance:
    """A segmented object: its points, one semantic class, and its centroid.

    ``source_indices`` lists the raw scan points the instance was built from
    (before voxel downsampling); it is what segmentation quality is scored on.
    """

    points: np.ndarray
    semantic: int
    scan_id: int = 0
    instance_id: int = 0
    source_indices: np.ndarray | None = None
    centroid: np.ndarray = field(init=False)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("instance must contain at least one point")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "semantic", int(self.semantic))
        centroid = pts.mean(axis=0)
        centroid.setflags(write=False)
        object.__setattr__(self, "centroid", centroid)
        if self.source_indices is not None:
            idx = np.array(self.source_indices, dtype=np.int64)
            idx.setflags(write=False)
            object.__setattr__(self, "source_indices", idx)

    def __len__(self):
        return len(self.points)

    @property
    def cloud(self) -> PointCloud:
        return PointCloud(self.points)

    @property
    def semantic_class(self) -> SemanticClass:
        return SemanticClass(self.semantic)

    def transformed(self, pose) -> "ObjectInstance":
        return ObjectInstance(pose.apply(self.points), self.semantic, self.scan_id,
                              self.instance_id, self.source_indices)

    def __eq__(self, other):
        if not isinstance(other, ObjectInstance):
            return NotImplemented
        same_idx = (self.source_indices is None and other.source_indices is None) or (
            self.source_indices is not None and other.source_indices is not None
            and np.array_equal(self.source_indices, other.source_indices))
        return (self.semantic == other.semantic and self.scan_id == other.scan_id
                and self.instance_id == other.instance_id and same_idx
                and np.array_equal(self.points, other.points))


def adaptive_radius(point, origin, params: SegmentationParams) -> float:
    """Clustering radius for one point given the sensor origin."""
    d = math.dist(tuple(np.asarray(point, dtype=float)), tuple(np.asarray(origin, dtype=float)))
    return params.alpha * d * math.tan(params.vfov / params.beams)


def adaptive_radii(points, origin, params: SegmentationParams) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if params.fixed_radius is not None:
        return np.full(len(pts), float(params.fixed_radius))
    d = np.linalg.norm(pts - np.asarray(origin, dtype=np.float64), axis=1)
    return params.alpha * d * math.tan(params.vfov / params.beams)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Voxel-downsampled cloud; ``inverse[i]`` is the voxel of raw point i."""

    points: np.ndarray
    semantic: np.ndarray | None
    instance: np.ndarray | None
    inverse: np.ndarray
    counts: np.ndarray


def _majority(inverse: np.ndarray, labels: np.ndarray, n_voxels: int) -> np.ndarray:
    # per voxel: most frequent label, ties to the lowest label
    labels = np.asarray(labels, dtype=np.int64)
    order = np.lexsort((labels, inverse))
    v, lab = inverse[order], labels[order]
    new_run = np.ones(len(v), dtype=bool)
    new_run[1:] = (v[1:] != v[:-1]) | (lab[1:] != lab[:-1])
    starts = np.flatnonzero(new_run)
    run_counts = np.diff(np.append(starts, len(v)))
    run_v, run_lab = v[starts], lab[starts]
    pick = np.lexsort((run_lab, -run_counts, run_v))
    run_v, run_lab = run_v[pick], run_lab[pick]
    first = np.ones(len(run_v), dtype=bool)
    first[1:] = run_v[1:] != run_v[:-1]
    out = np.empty(n_voxels, dtype=np.int64)
    out[run_v[first]] = run_lab[first]
    return out


def voxel_downsample(points, voxel_size: float, semantic=None, instance=None) -> VoxelGrid:
    """One centroid per occupied voxel, with majority-vote labels."""
    if not voxel_size > 0:
        raise ValueError("voxel_size must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return VoxelGrid(np.zeros((0, 3)), None if semantic is None else empty,
                         None if instance is None else empty, empty, empty)
    keys = np.floor(pts / voxel_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n_vox = len(counts)
    centroids = np.stack([np.bincount(inverse, weights=pts[:, k], minlength=n_vox)
                          for k in range(3)], axis=1) / counts[:, None]
    sem = None
    if semantic is not None:
        semantic = np.asarray(semantic, dtype=np.int64)
        votes = np.bincount(inverse * NUM_CLASSES + semantic, minlength=n_vox * NUM_CLASSES)
        sem = votes.reshape(n_vox, NUM_CLASSES).argmax(axis=1)
    inst = None if instance is None else _majority(inverse, instance, n_vox)
    return VoxelGrid(centroids, sem, inst, inverse, counts)


def _linked_pairs(pts, radii, band_ratio=1.3):
    """All pairs (i, j) with |pi - pj| <= max(ri, rj).

    Points are processed in bands of similar radius, sorted ascending. A pair
    is found in the band of its larger-radius endpoint: within the band by a
    self-join, and against all smaller-radius points by a cross-join, each at
    the band's largest radius and then filtered exactly.
    """
    order = np.argsort(radii, kind="stable")
    p, r = pts[order], radii[order]
    n = len(p)
    rows, cols = [], []
    lo = 0
    while lo < n:
        hi = max(int(np.searchsorted(r, r[lo] * band_ratio, side="right")), lo + 1)
        r_band = r[hi - 1]
        band = cKDTree(p[lo:hi])
        same = band.query_pairs(r_band, output_type="ndarray")
        if len(same):
            i, j = same[:, 0] + lo, same[:, 1] + lo
            rows.append(i)
            cols.append(j)
        if lo > 0:
            cross = band.sparse_distance_matrix(cKDTree(p[:lo]), r_band, output_type="ndarray")
            if len(cross):
                i = cross["i"] + lo
                rows.append(i)
                cols.append(cross["j"])
        lo = hi
    if not rows:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    i, j = np.concatenate(rows), np.concatenate(cols)
    d2 = np.einsum("ij,ij->i", p[i] - p[j], p[i] - p[j])
    keep = d2 <= np.maximum(r[i], r[j]) ** 2
    return order[i[keep]], order[j[keep]]


def cluster_points(points, radii) -> np.ndarray:
    """Single-linkage component labels where i~j iff |pi - pj| <= max(ri, rj)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    i, j = _linked_pairs(pts, np.asarray(radii, dtype=np.float64))
    graph = coo_matrix((np.ones(len(i), dtype=np.int8), (i, j)), shape=(n, n))
    _, labels = connected_components(graph.tocsr(), directed=False)
    return labels


def segment_instances(scan, params: SegmentationParams) -> list[ObjectInstance]:
    """Split a labeled scan into object instances.

    Args:
        scan: object with ``points`` (sensor frame), ``semantic`` and, optionally,
            ``origin`` and ``scan_id`` attributes (a ``LabeledScan`` works).
        params: segmentation parameters.

    Returns:
        Instances sorted by class, then by the lowest downsampled point index
        they contain; ``instance_id`` numbers them from 0 in that order.
    """
    points = np.asarray(scan.points, dtype=np.float64)
    if len(points) == 0:
        return []
    origin = getattr(scan, "origin", None)
    origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=np.float64)
    scan_id = int(getattr(scan, "scan_id", 0))
    grid = voxel_downsample(points, params.voxel_size, semantic=scan.semantic)
    rho = adaptive_radii(grid.points, origin, params)

    labels = np.full(len(grid.points), -1, dtype=np.int64)
    found = []  # (class, first voxel index, voxel indices)
    for cls in np.unique(grid.semantic):
        idx = np.flatnonzero(grid.semantic == cls)
        comp = cluster_points(grid.points[idx], rho[idx])
        order = np.argsort(comp, kind="stable")
        bounds = np.flatnonzero(np.diff(comp[order])) + 1
        for members in np.split(idx[order], bounds):
            if len(members) >= params.min_points:
                found.append((int(cls), int(members[0]), members))
    found.sort(key=lambda f: (f[0], f[1]))

    for k, (_, _, members) in enumerate(found):
        labels[members] = k
    raw_labels = labels[grid.inverse]
    raw_order = np.argsort(raw_labels, kind="stable")
    raw_sorted = raw_labels[raw_order]
    instances = []
    for k, (cls, _, members) in enumerate(found):
        lo, hi = np.searchsorted(raw_sorted, [k, k + 1])
        instances.append(ObjectInstance(grid.points[members], cls, scan_id, k,
                                        source_indices=np.sort(raw_order[lo:hi])))
    return instances


@dataclass
class SegmentationQuality:
    per_class: dict  # SemanticClass -> AP, or None when the class is absent from truth
    mean_ap: float
    true_positives: dict
    false_positives: dict


def _average_precision(tp_flags: list[bool], n_truth: int) -> float:
    if n_truth == 0:
        return float("nan")
    if not tp_flags:
        return 0.0
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~np.asarray(tp_flags))
    recall = tp / n_truth
    precision = tp / (tp + fp)
    # all-point interpolation: precision envelope integrated over recall steps
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def segmentation_quality(predicted, truth, iou_threshold: float = 0.5,
                         min_truth_points: int = 1) -> SegmentationQuality:
    """Per-class average precision of predicted instances against scan labels.

    Predictions are matched greedily in order of decreasing size to the
    unmatched truth instance of the same class with the highest point IoU.
    """
    truth_sets: dict[int, list[set]] = {}
    inst = np.asarray(truth.instance)
    sem = np.asarray(truth.semantic)
    for obj in np.unique(inst):
        members = np.flatnonzero(inst == obj)
        if len(members) < min_truth_points:
            continue
        cls = int(np.bincount(sem[members], minlength=NUM_CLASSES).argmax())
        truth_sets.setdefault(cls, []).append(set(members.tolist()))

    per_class, tps, fps = {}, {}, {}
    classes = sorted(set(truth_sets) | {p.semantic for p in predicted})
    for cls in classes:
        gts = truth_sets.get(cls, [])
        preds = [p for p in predicted if p.semantic == cls]
        preds.sort(key=lambda p: (-len(p.source_indices),
                                  int(p.source_indices[0]) if len(p.source_indices) else 0))
        matched = [False] * len(gts)
        flags = []
        for p in preds:
            pset = set(p.source_indices.tolist())
            best, best_iou = -1, 0.0
            for g, gset in enumerate(gts):
                if matched[g]:
                    continue
                inter = len(pset & gset)
                iou = inter / (len(pset) + len(gset) - inter)
                if iou > best_iou:
                    best, best_iou = g, iou
            hit = best >= 0 and best_iou >= iou_threshold
            if hit:
                matched[best] = True
            flags.append(hit)
        tps[SemanticClass(cls)] = int(sum(flags))
        fps[SemanticClass(cls)] = len(flags) - int(sum(flags))
        per_class[SemanticClass(cls)] = None if not gts else _average_precision(flags, len(gts))
    defined = [v for v in per_class.values() if v is not None]
    mean_ap = float(np.mean(defined)) if defined else float("nan")
    return SegmentationQuality(per_class, mean_ap, tps, fps)
