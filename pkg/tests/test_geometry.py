import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from instaloc.geometry import (Pose, PointCloud, compose, is_rotation, random_rotation, rot_x,
                               rot_z, rotation_angle_between, transform_cloud)


def random_pose(rng):
    return Pose(random_rotation(rng), rng.normal(scale=5.0, size=3))


seeds = st.integers(0, 2**32 - 1)


def test_identity_compose():
    assert compose(Pose.identity(), Pose.identity()) == Pose.identity()


def test_inverse_is_identity():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = random_pose(rng)
        for p in (a @ a.inverse(), a.inverse() @ a):
            assert np.allclose(p.rotation, np.eye(3), atol=1e-9)
            assert np.allclose(p.translation, 0, atol=1e-9)


def test_pure_translations_add():
    p = compose(Pose.from_translation(1, 0, 0), Pose.from_translation(0, 2, 0))
    assert np.array_equal(p.translation, [1, 2, 0])
    assert np.array_equal(p.rotation, np.eye(3))


@given(seeds)
def test_compose_applies_right_then_left(seed):
    rng = np.random.default_rng(seed)
    a, b = random_pose(rng), random_pose(rng)
    p = rng.normal(size=(5, 3))
    assert np.allclose((a @ b).apply(p), a.apply(b.apply(p)), atol=1e-9)


@given(seeds)
def test_compose_associative(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_pose(rng) for _ in range(3))
    l, r = (a @ b) @ c, a @ (b @ c)
    assert np.allclose(l.rotation, r.rotation, atol=1e-9)
    assert np.allclose(l.translation, r.translation, atol=1e-9)


def test_random_rotations_are_proper():
    rng = np.random.default_rng(1)
    assert all(is_rotation(random_rotation(rng)) for _ in range(200))
    assert not is_rotation(np.diag([1.0, 1.0, -1.0]))


def test_transform_cloud_examples():
    cloud = PointCloud(np.random.default_rng(0).normal(size=(20, 3)))
    assert transform_cloud(Pose(), cloud) == cloud
    moved = transform_cloud(Pose.from_translation(0, 0, 1), PointCloud([[1, 1, 1]]))
    assert np.array_equal(moved.points, [[1, 1, 2]])
    yawed = transform_cloud(Pose.from_yaw(math.pi / 2), PointCloud([[1, 0, 0]]))
    assert np.allclose(yawed.points, [[0, 1, 0]], atol=1e-12)


def test_transform_cloud_moves_origin_and_keeps_order():
    pose = Pose.from_yaw(0.3, (1, 2, 3))
    cloud = PointCloud([[1, 0, 0], [0, 1, 0]], origin=[0, 0, 0])
    out = transform_cloud(pose, cloud)
    assert np.allclose(out.origin, [1, 2, 3])
    assert np.allclose(out.points, pose.apply(cloud.points))


@given(seeds)
def test_transform_preserves_distances(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(30, 3))
    out = transform_cloud(random_pose(rng), PointCloud(pts)).points
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    d1 = np.linalg.norm(out[:, None] - out[None], axis=2)
    assert np.allclose(d0, d1, atol=1e-9)


def test_rotation_angle_examples():
    assert rotation_angle_between(np.eye(3), np.eye(3)) == 0.0
    assert rotation_angle_between(np.eye(3), rot_z(math.radians(10))) == pytest.approx(10, abs=1e-9)
    assert rotation_angle_between(np.eye(3), rot_x(math.pi)) == pytest.approx(180, abs=1e-9)


def test_rotation_angle_small_angles_precise():
    for deg in (1e-6, 1e-4, 0.01, 1.0):
        assert rotation_angle_between(np.eye(3), rot_z(math.radians(deg))) == \
            pytest.approx(deg, rel=1e-7)


@given(seeds)
@settings(max_examples=200)
def test_rotation_angle_symmetric_and_triangle(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_rotation(rng) for _ in range(3))
    ab, ba = rotation_angle_between(a, b), rotation_angle_between(b, a)
    assert ab == pytest.approx(ba, abs=1e-9)
    assert 0 <= ab <= 180
    assert rotation_angle_between(a, c) <= ab + rotation_angle_between(b, c) + 1e-6


def test_pose_validation_and_roundtrip():
    with pytest.raises(ValueError):
        Pose(np.eye(2), np.zeros(3))
    with pytest.raises(ValueError):
        Pose(np.eye(3), [np.nan, 0, 0])
    p = Pose.from_yaw(0.7, (1.5, -2, 0.25))
    assert Pose.from_dict(p.to_dict()) == p
    assert Pose.from_matrix(p.matrix()) == p
    with pytest.raises(ValueError):
        p.translation[0] = 3.0


def test_point_cloud_rejects_non_finite():
    with pytest.raises(ValueError):
        PointCloud([[0, 0, np.inf]])
