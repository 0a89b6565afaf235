import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from instaloc.labels import SemanticClass
from instaloc.segmentation import (ObjectInstance, SegmentationParams, adaptive_radii,
                                   adaptive_radius, cluster_points, segment_instances,
                                   segmentation_quality, voxel_downsample)
from instaloc.simulator import LabeledScan

from oracles import cluster_oracle, segment_oracle, voxel_oracle

CHAIR, TABLE = int(SemanticClass.CHAIR), int(SemanticClass.TABLE)


def scan_of(points, semantic, instance=None):
    points = np.asarray(points, float)
    if instance is None:
        instance = np.zeros(len(points), int)
    return LabeledScan(points, semantic, instance)


def partition(labels):
    groups = {}
    for i, l in enumerate(labels):
        groups.setdefault(int(l), set()).add(i)
    return {frozenset(g) for g in groups.values()}


def test_radius_examples():
    p = SegmentationParams(alpha=1.0, beams=128, vfov=math.pi / 2)
    assert adaptive_radius([0, 0, 0], [0, 0, 0], p) == 0.0
    assert abs(adaptive_radius([10, 0, 0], [0, 0, 0], p) - 10 * math.tan(math.pi / 256)) < 1e-12
    assert adaptive_radius([10, 0, 0], [0, 0, 0], p) == pytest.approx(0.12272, abs=1e-5)
    assert adaptive_radius([0, 20, 0], [0, 0, 0], p) == 2 * adaptive_radius([0, 10, 0], [0, 0, 0], p)


def test_radius_monotone_and_vectorized():
    p = SegmentationParams()
    pts = np.random.default_rng(0).normal(scale=5, size=(200, 3))
    origin = np.array([0.5, -1, 0.2])
    r = adaptive_radii(pts, origin, p)
    assert np.allclose(r, [adaptive_radius(q, origin, p) for q in pts], rtol=1e-12)
    d = np.linalg.norm(pts - origin, axis=1)
    order = np.argsort(d)
    assert np.all(np.diff(r[order]) >= 0)
    assert np.all(adaptive_radii(pts, origin, SegmentationParams(fixed_radius=0.3)) == 0.3)


def test_params_validation():
    for kw in ({"voxel_size": 0}, {"alpha": -1}, {"min_points": 0}, {"beams": 1}):
        with pytest.raises(ValueError):
            SegmentationParams(**kw)


def test_voxel_examples():
    g = voxel_downsample([[0.0101, 0.01, 0.01], [0.0111, 0.01, 0.01]], 0.02)
    assert len(g.points) == 1 and np.allclose(g.points[0], [0.0106, 0.01, 0.01])
    grid = np.stack(np.meshgrid(*[np.arange(5) * 0.1 + 0.005] * 3), -1).reshape(-1, 3)
    assert len(voxel_downsample(grid, 0.02).points) == len(grid)
    pts = np.random.default_rng(0).random((100_000, 3))
    assert len(voxel_downsample(pts, 0.02).points) <= 50 ** 3


def test_voxel_majority_ties_to_lowest():
    pts = [[0.001, 0, 0], [0.002, 0, 0], [0.003, 0, 0], [0.004, 0, 0], [0.5, 0, 0]]
    g = voxel_downsample(pts, 0.02, semantic=[5, 3, 5, 3, 7], instance=[9, 9, 2, 2, 1])
    assert g.semantic.tolist() == [3, 7]
    assert g.instance.tolist() == [2, 1]
    assert g.counts.tolist() == [4, 1]


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_voxel_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    pts = rng.random((300, 3)) * 0.2
    sem = rng.integers(0, 3, 300)
    g = voxel_downsample(pts, 0.05, semantic=sem)
    ref = voxel_oracle(pts, sem, 0.05)
    got = sorted((tuple(np.round(p, 9)), s) for p, s in zip(g.points, g.semantic))
    want = sorted((tuple(np.round(p, 9)), s) for p, s in ref)
    assert got == want


@given(st.integers(0, 10_000), st.floats(0.01, 0.3))
@settings(max_examples=40, deadline=None)
def test_cluster_matches_union_find(seed, scale):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 300))
    pts = rng.random((n, 3))
    radii = rng.random(n) * scale
    assert partition(cluster_points(pts, radii)) == cluster_oracle(pts, radii)


def test_cluster_uses_larger_radius():
    pts = np.array([[0, 0, 0], [1.0, 0, 0]])
    assert len(set(cluster_points(pts, [0.1, 1.0]))) == 1
    assert len(set(cluster_points(pts, [0.1, 0.99]))) == 2


def blob(rng, center, n=100, radius=0.05):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.asarray(center) + d * radius * rng.random((n, 1)) ** (1 / 3)


def test_two_chair_blobs_separated():
    rng = np.random.default_rng(0)
    params = SegmentationParams(voxel_size=0.001, min_points=50)
    c1 = np.array([3.0, 0, 0])
    rho = adaptive_radius(c1, [0, 0, 0], params)
    c2 = c1 + [0, 10 * rho + 0.1, 0]
    pts = np.vstack([blob(rng, c1), blob(rng, c2)])
    inst = segment_instances(scan_of(pts, [CHAIR] * 200), params)
    assert len(inst) == 2
    assert sorted(len(i) for i in inst) == [100, 100]


def test_class_partition_first():
    rng = np.random.default_rng(1)
    params = SegmentationParams(voxel_size=0.001, min_points=50)
    pts = np.vstack([blob(rng, [3, 0, 0]), blob(rng, [3, 0, 0])])
    inst = segment_instances(scan_of(pts, [CHAIR] * 100 + [TABLE] * 100), params)
    assert sorted(i.semantic for i in inst) == sorted([CHAIR, TABLE])


def test_small_blob_dropped():
    rng = np.random.default_rng(2)
    params = SegmentationParams(voxel_size=0.001, min_points=50)
    assert segment_instances(scan_of(blob(rng, [2, 0, 0], n=30), [CHAIR] * 30), params) == []
    assert segment_instances(scan_of(np.zeros((0, 3)), []), params) == []


def test_segment_output_contract():
    rng = np.random.default_rng(3)
    params = SegmentationParams(voxel_size=0.01, min_points=20)
    pts = np.vstack([blob(rng, [2, 0, 0], 400, 0.2), blob(rng, [0, 3, 0], 400, 0.2),
                     blob(rng, [0, 0, 4], 400, 0.2)])
    sem = [TABLE] * 400 + [CHAIR] * 800
    inst = segment_instances(scan_of(pts, sem), params)
    assert [i.instance_id for i in inst] == list(range(len(inst)))
    keys = [(i.semantic, int(i.source_indices.min())) for i in inst]
    assert [k[0] for k in keys] == sorted(k[0] for k in keys)
    seen = np.concatenate([i.source_indices for i in inst])
    assert len(seen) == len(set(seen.tolist()))
    for i in inst:
        assert np.allclose(i.centroid, i.points.mean(axis=0), atol=1e-9)
        assert len(i) >= params.min_points
        assert np.all(np.asarray(sem)[i.source_indices] == i.semantic)


def test_permutation_invariant():
    rng = np.random.default_rng(4)
    params = SegmentationParams(voxel_size=0.02, min_points=10)
    pts = rng.random((2000, 3)) * [4, 4, 1] + [1, 1, 0]
    sem = rng.integers(4, 7, 2000)
    perm = rng.permutation(2000)
    a = segment_instances(scan_of(pts, sem), params)
    b = segment_instances(scan_of(pts[perm], sem[perm]), params)
    as_sets = lambda ins: {(i.semantic, frozenset(map(tuple, np.round(i.points, 9)))) for i in ins}
    assert as_sets(a) == as_sets(b)


def random_scan(rng):
    n = int(rng.integers(20, 501))
    k = int(rng.integers(1, 6))
    centers = rng.uniform(-6, 6, size=(k, 3))
    pts = centers[rng.integers(0, k, n)] + rng.normal(scale=rng.uniform(0.05, 0.6), size=(n, 3))
    sem = rng.integers(0, 3, n)
    origin = rng.normal(size=3)
    return pts, sem, origin


def run_oracle_case(rng):
    pts, sem, origin = random_scan(rng)
    params = SegmentationParams(voxel_size=float(rng.uniform(0.01, 0.2)),
                                alpha=float(rng.uniform(0.5, 8)),
                                min_points=int(rng.integers(1, 15)))
    scan = LabeledScan(pts - origin, sem, np.zeros(len(pts), int))
    got = {(i.semantic, frozenset(tuple(np.round(p, 9)) for p in i.points))
           for i in segment_instances(scan, params)}
    want = segment_oracle(pts - origin, sem, np.zeros(3), params.voxel_size, params.alpha,
                          params.vfov, params.beams, params.min_points)
    return got == want


def test_segment_matches_union_find_oracle_small():
    rng = np.random.default_rng(11)
    assert all(run_oracle_case(rng) for _ in range(20))


def test_quality_examples():
    rng = np.random.default_rng(5)
    pts = np.vstack([blob(rng, [2, 0, 0], 200, 0.1), blob(rng, [0, 2, 0], 200, 0.1)])
    sem = np.array([CHAIR] * 200 + [TABLE] * 200)
    inst = np.array([1] * 200 + [2] * 200)
    scan = LabeledScan(pts, sem, inst)
    truth_instances = [ObjectInstance(pts[:200], CHAIR, source_indices=np.arange(200)),
                       ObjectInstance(pts[200:], TABLE, source_indices=np.arange(200, 400))]
    q = segmentation_quality(truth_instances, scan)
    assert q.per_class[SemanticClass.CHAIR] == 1.0 and q.per_class[SemanticClass.TABLE] == 1.0
    assert q.mean_ap == 1.0
    assert segmentation_quality([], scan).mean_ap == 0.0
    assert q.per_class.get(SemanticClass.WALL) is None


def test_quality_split_half():
    pts = np.random.default_rng(6).random((100, 3))
    scan = LabeledScan(pts, [CHAIR] * 100, [7] * 100)
    halves = [ObjectInstance(pts[:50], CHAIR, source_indices=np.arange(50)),
              ObjectInstance(pts[50:], CHAIR, source_indices=np.arange(50, 100))]
    q = segmentation_quality(halves, scan, iou_threshold=0.5)
    assert q.true_positives[SemanticClass.CHAIR] == 1
    assert q.false_positives[SemanticClass.CHAIR] == 1
    assert q.per_class[SemanticClass.CHAIR] == 1.0  # the match comes first, at recall 1


def test_segment_real_scan(small_scene_scan):
    scan = small_scene_scan
    inst = segment_instances(scan, SegmentationParams.from_lidar(scan.lidar))
    classes = {i.semantic_class for i in inst}
    assert {SemanticClass.FLOOR, SemanticClass.CEILING, SemanticClass.WALL} <= classes
    q = segmentation_quality(inst, scan, min_truth_points=200)
    assert q.mean_ap > 0.5
