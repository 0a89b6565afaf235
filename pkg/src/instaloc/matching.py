"""Correspondence proposal, geometric-consistency grouping and RANSAC pose recovery."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose
from .mapdb import InstanceMap, knn_query
from .segmentation import segment_instances

LOCALIZED = "localized"
NO_CONSENSUS = "no-consensus"
DEGENERATE = "degenerate"


class DegenerateConfiguration(ValueError):
    """Point pairs do not determine a rotation (fewer than 3, or collinear)."""


@dataclass(frozen=True)
class Correspondence:
    query_index: int
    map_index: int
    distance: float
    rank: int = 0


@dataclass(frozen=True)
class MatchParams:
    neighbors: int = 3
    epsilon: float = 0.3
    tau: int = 4
    ransac_iterations: int = 500
    inlier_radius: float = 0.3
    class_filter: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.neighbors < 1 or not self.epsilon > 0 or self.tau < 3:
            raise ValueError("need neighbors >= 1, epsilon > 0 and tau >= 3")
        if self.ransac_iterations < 1 or not self.inlier_radius > 0:
            raise ValueError("need at least one RANSAC iteration and a positive inlier radius")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class LocalizationResult:
    status: str
    pose: Pose | None = None
    inliers: list = field(default_factory=list)
    group_size: int = 0
    residual: float = float("nan")
    timings_ms: dict = field(default_factory=dict)

    @property
    def localized(self) -> bool:
        return self.status == LOCALIZED

    def to_dict(self, imap: InstanceMap | None = None) -> dict:
        def corr(c):
            d = {"query_instance": c.query_index, "map_entry": c.map_index,
                 "descriptor_distance": c.distance}
            if imap is not None:
                d["map_scan_index"] = imap.entries[c.map_index].scan_index
            return d
        return {"status": self.status,
                "pose": None if self.pose is None else self.pose.to_dict(),
                "group_size": self.group_size,
                "residual": None if not np.isfinite(self.residual) else self.residual,
                "inliers": [corr(c) for c in self.inliers]}


def propose_correspondences(query_descriptors, query_semantics, imap: InstanceMap,
                            n: int, class_filter: bool = True) -> list[Correspondence]:
    """Each query instance paired with its ``n`` nearest map entries.

    With ``class_filter`` the search only considers entries of the query
    instance's class. The result is sorted by descriptor distance.
    """
    out = []
    if len(imap) == 0:
        return out
    for qi, (desc, sem) in enumerate(zip(query_descriptors, query_semantics)):
        mask = imap.semantics == int(sem) if class_filter else None
        if mask is not None and not mask.any():
            continue
        idx, dist = knn_query(imap, desc, n, mask)
        out += [Correspondence(qi, int(j), float(d), r) for r, (j, d) in enumerate(zip(idx, dist))]
    out.sort(key=lambda c: (c.distance, c.query_index, c.rank))
    return out


def consistency_groups(cands, query_centroids, map_centroids, epsilon: float, tau: int):
    """Consensus groups of candidate correspondences.

    For each seed, every other candidate whose query-side and map-side
    centroid distances to the seed differ by less than ``epsilon`` joins,
    at most one candidate per query instance. Groups smaller than ``tau`` are
    dropped, identical groups kept once, and the result sorted by size
    (largest first, stable in seed order).
    """
    if not cands:
        return []
    q = np.asarray(query_centroids, dtype=np.float64)[[c.query_index for c in cands]]
    m = np.asarray(map_centroids, dtype=np.float64)[[c.map_index for c in cands]]
    dq = np.linalg.norm(q[:, None, :] - q[None, :, :], axis=2)
    dm = np.linalg.norm(m[:, None, :] - m[None, :, :], axis=2)
    consistent = np.abs(dq - dm) < epsilon
    qidx = [c.query_index for c in cands]
    groups, seen = [], set()
    for s in range(len(cands)):
        members, used = [s], {qidx[s]}
        for j in np.flatnonzero(consistent[s]):
            if qidx[j] not in used:
                members.append(int(j))
                used.add(qidx[j])
        if len(members) < tau:
            continue
        key = tuple(sorted(members))
        if key in seen:
            continue
        seen.add(key)
        groups.append([cands[k] for k in members])
    groups.sort(key=len, reverse=True)
    return groups


def consistency_group(cands, imap: InstanceMap, query_centroids, epsilon: float, tau: int):
    return consistency_groups(cands, query_centroids, imap.centroids, epsilon, tau)


def kabsch_align(query_points, map_points, tol: float = 1e-9) -> Pose:
    """Least-squares rigid transform taking query points onto map points.

    Raises:
        DegenerateConfiguration: fewer than three pairs or collinear points.
    """
    Q = np.asarray(query_points, dtype=np.float64).reshape(-1, 3)
    M = np.asarray(map_points, dtype=np.float64).reshape(-1, 3)
    if len(Q) != len(M) or len(Q) < 3:
        raise DegenerateConfiguration("need at least three point pairs")
    cq, cm = Q.mean(axis=0), M.mean(axis=0)
    Qc, Mc = Q - cq, M - cm
    for X in (Qc, Mc):
        s = np.linalg.svd(X, compute_uv=False)
        if s[0] == 0 or s[1] <= tol * max(1.0, s[0]):
            raise DegenerateConfiguration("points are collinear")
    H = Qc.T @ Mc
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return Pose(R, cm - R @ cq)


def _residuals(pose: Pose, Q, M):
    return np.linalg.norm(pose.apply(Q) - M, axis=1)


def ransac_pose(group, query_centroids, map_centroids, params: MatchParams,
                seed: int | None = None) -> LocalizationResult:
    """Robust pose from a consensus group via 3-point Kabsch hypotheses.

    The best hypothesis has the most inliers, then the lowest inlier RMS,
    then the earliest iteration. Its inliers are refit jointly.
    """
    group = list(group)
    Q = np.asarray(query_centroids, dtype=np.float64)[[c.query_index for c in group]]
    M = np.asarray(map_centroids, dtype=np.float64)[[c.map_index for c in group]]
    n = len(group)
    if n < 3:
        return LocalizationResult(NO_CONSENSUS, group_size=n)
    rng = np.random.default_rng(params.seed if seed is None else seed)
    best = None  # (count, rms, iteration, mask)
    for it in range(params.ransac_iterations):
        sample = rng.choice(n, size=3, replace=False)
        try:
            pose = kabsch_align(Q[sample], M[sample], tol=1e-6)
        except DegenerateConfiguration:
            continue
        res = _residuals(pose, Q, M)
        mask = res <= params.inlier_radius
        count = int(mask.sum())
        rms = float(np.sqrt(np.mean(res[mask] ** 2))) if count else np.inf
        if best is None or count > best[0] or (count == best[0] and rms < best[1]):
            best = (count, rms, it, mask)
        if count == n and rms == 0.0:
            break
    if best is None:
        return LocalizationResult(DEGENERATE, group_size=n)
    mask = best[3]
    if best[0] < 3:
        return LocalizationResult(NO_CONSENSUS, group_size=n)
    inliers = [c for c, k in zip(group, mask) if k]
    try:
        pose = kabsch_align(Q[mask], M[mask], tol=1e-6)
    except DegenerateConfiguration:
        return LocalizationResult(DEGENERATE, group_size=n)
    rms = float(np.sqrt(np.mean(_residuals(pose, Q[mask], M[mask]) ** 2)))
    status = LOCALIZED if len(inliers) >= params.tau else NO_CONSENSUS
    return LocalizationResult(status, pose, inliers, n, rms)


def localize_instances(instances, descriptors, imap: InstanceMap, params: MatchParams,
                       timings: dict | None = None) -> LocalizationResult:
    """Match described query instances against the map and estimate the pose."""
    timings = {} if timings is None else timings
    t0 = time.perf_counter()
    cands = propose_correspondences(descriptors, [i.semantic for i in instances], imap,
                                    params.neighbors, params.class_filter)
    t1 = time.perf_counter()
    qc = np.array([i.centroid for i in instances]) if instances else np.zeros((0, 3))
    groups = consistency_groups(cands, qc, imap.centroids, params.epsilon, params.tau)
    t2 = time.perf_counter()
    timings["propose"] = (t1 - t0) * 1e3
    timings["group"] = (t2 - t1) * 1e3
    result = LocalizationResult(NO_CONSENSUS)
    saw_degenerate = bool(groups)
    for g in groups:
        r = ransac_pose(g, qc, imap.centroids, params)
        if r.status != DEGENERATE:
            saw_degenerate = False
        if r.localized:
            result = r
            break
    else:
        if saw_degenerate:
            result = LocalizationResult(DEGENERATE, group_size=len(groups[0]))
        elif groups:
            result.group_size = len(groups[0])
    timings["ransac"] = (time.perf_counter() - t2) * 1e3
    result.timings_ms = timings
    return result


def localize(scan, imap: InstanceMap, seg_params, engine, params: MatchParams) -> LocalizationResult:
    """Segment, describe, match and align one query scan against the map.

    The returned pose maps query-sensor coordinates into the map frame.
    """
    timings = {}
    t0 = time.perf_counter()
    instances = segment_instances(scan, seg_params)
    t1 = time.perf_counter()
    descriptors = engine.describe(instances)
    t2 = time.perf_counter()
    timings["segment"] = (t1 - t0) * 1e3
    timings["describe"] = (t2 - t1) * 1e3
    if not instances:
        timings.update(propose=0.0, group=0.0, ransac=0.0)
        return LocalizationResult(NO_CONSENSUS, timings_ms=timings)
    return localize_instances(instances, descriptors, imap, params, timings)


# --------------------------------------------------------------------------
# evaluation

SUCCESS_TRANSLATION = 0.2  # metres
SUCCESS_ROTATION = 10.0  # degrees


@dataclass
class EvaluationReport:
    recall: float
    precision: float
    detections: int
    correct: int
    queries: int
    no_detections: bool
    records: list

    def summary(self) -> dict:
        return {"recall": self.recall, "precision": self.precision,
                "detections": self.detections, "correct": self.correct,
                "queries": self.queries, "precision_undefined": self.no_detections}


def score_results(results, truths, max_translation=SUCCESS_TRANSLATION,
                  max_rotation=SUCCESS_ROTATION, query_ids=None) -> EvaluationReport:
    """Recall and precision of localization results against ground-truth poses.

    A localized result is correct when it lies within ``max_translation``
    metres and ``max_rotation`` degrees of the truth. With no detections at
    all, precision is reported as 1.0 and ``no_detections`` is set.
    """
    from .geometry import rotation_angle_between, translation_error

    records = []
    detections = correct = 0
    for k, (res, truth) in enumerate(zip(results, truths)):
        rec = {"query": k if query_ids is None else query_ids[k], "status": res.status,
               "translation_error": float("nan"), "rotation_error": float("nan"),
               "correct": False, "inliers": len(res.inliers),
               "timing_ms": float(sum(res.timings_ms.values()))}
        if res.localized:
            detections += 1
            te = translation_error(res.pose, truth)
            re = rotation_angle_between(res.pose.rotation, truth.rotation)
            ok = te <= max_translation and re <= max_rotation
            correct += ok
            rec.update(translation_error=te, rotation_error=re, correct=bool(ok))
        records.append(rec)
    n = len(records)
    recall = correct / n if n else 0.0
    precision = correct / detections if detections else 1.0
    return EvaluationReport(recall, precision, detections, correct, n, detections == 0, records)


def evaluate(imap: InstanceMap, queries, truths, seg_params, engine, params: MatchParams,
             **kwargs) -> EvaluationReport:
    """Localize every query scan and score it against its ground-truth pose."""
    results = [localize(q, imap, seg_params, engine, params) for q in queries]
    return score_results(results, truths, query_ids=[getattr(q, "scan_id", k)
                                                     for k, q in enumerate(queries)], **kwargs)
