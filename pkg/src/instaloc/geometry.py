"""Rigid-body types and SE(3) arithmetic shared by the whole pipeline."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def _frozen(a, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


def rot_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation matrix (via a random unit quaternion)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def is_rotation(R, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) <= tol)


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform mapping a point p to ``rotation @ p + translation``.

    Args:
        rotation: 3x3 proper orthonormal matrix.
        translation: 3-vector in meters.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))
        if not np.all(np.isfinite(self.translation)):
            raise ValueError("pose translation must be finite")

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_translation(cls, x: float, y: float, z: float) -> "Pose":
        return cls(np.eye(3), np.array([x, y, z], dtype=np.float64))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(rot_z(yaw), np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -(Rt @ self.translation))

    def apply(self, points) -> np.ndarray:
        """Transform a single point (3,) or an (N, 3) array."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return bool(np.array_equal(self.rotation, other.rotation)
                    and np.array_equal(self.translation, other.translation))

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def __repr__(self):
        t = ", ".join(f"{v:.4f}" for v in self.translation)
        return f"Pose(t=[{t}], yaw={math.degrees(yaw_of(self.rotation)):.2f}deg)"

    def to_dict(self) -> dict:
        return {
            "translation": [float(v) for v in self.translation],
            "rotation": [float(v) for v in self.rotation.ravel()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
                   np.array(d["translation"], dtype=np.float64))


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered (N, 3) point array with an optional sensor origin."""

    points: np.ndarray
    origin: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.origin is not None:
            object.__setattr__(self, "origin", _frozen(self.origin, (3,)))

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        same_origin = (self.origin is None and other.origin is None) or (
            self.origin is not None and other.origin is not None
            and np.array_equal(self.origin, other.origin))
        return same_origin and np.array_equal(self.points, other.points)


def compose(a: Pose, b: Pose) -> Pose:
    """Pose that applies ``b`` first and then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def transform_cloud(pose: Pose, cloud: PointCloud) -> PointCloud:
    origin = None if cloud.origin is None else pose.apply(cloud.origin)
    return PointCloud(pose.apply(cloud.points), origin)


def rotation_angle_between(a, b) -> float:
    """Geodesic angle in degrees between two rotation matrices."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    rel = a.T @ b
    c = min(1.0, max(-1.0, (np.trace(rel) - 1.0) / 2.0))
    # acos loses ~1e-8 rad near 0; atan2 with the skew part keeps full precision
    axis = np.array([rel[2, 1] - rel[1, 2], rel[0, 2] - rel[2, 0], rel[1, 0] - rel[0, 1]])
    s = min(1.0, float(np.linalg.norm(axis)) / 2.0)
    return math.degrees(math.atan2(s, c))


def translation_error(a: Pose, b: Pose) -> float:
    return float(np.linalg.norm(a.translation - b.translation))


def yaw_of(R) -> float:
    R = np.asarray(R)
    return math.atan2(R[1, 0], R[0, 0])
