"""Procedural indoor scenes and a labeled multi-beam lidar raycaster.

Scenes are rows of rectangular rooms joined by doorways. Every object is
either an oriented box or a triangle mesh (furniture meshes are unions of
boxes). Scans are returned in the sensor frame; each point carries the class
and object id of the surface it hit.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Pose, PointCloud, rot_z
from .labels import NUM_CLASSES, SemanticClass
from .segmentation import ObjectInstance, voxel_downsample

SCENE_FORMAT_VERSION = 1
SENSOR_HEIGHT = 1.2


class SceneGenerationError(RuntimeError):
    pass


class TripletGenerationError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# geometry primitives

@dataclass(frozen=True, eq=False)
class Box:
    """Box of full edge lengths ``size`` centred on its object frame origin."""

    size: np.ndarray

    def __post_init__(self):
        size = np.array(self.size, dtype=np.float64).reshape(3)
        if not np.all(size > 0):
            raise ValueError("box edge lengths must be positive")
        size.setflags(write=False)
        object.__setattr__(self, "size", size)

    def local_bounds(self):
        h = self.size / 2
        return -h, h

    def to_dict(self):
        return {"type": "box", "size": [float(v) for v in self.size]}


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(t) == 0:
            raise ValueError("mesh needs at least one triangle")
        if t.min() < 0 or t.max() >= len(v):
            raise ValueError("triangle index out of range")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    def local_bounds(self):
        used = self.vertices[np.unique(self.triangles)]
        return used.min(axis=0), used.max(axis=0)

    def to_dict(self):
        return {"type": "mesh",
                "vertices": [[float(c) for c in v] for v in self.vertices],
                "triangles": [[int(c) for c in t] for t in self.triangles]}

    @classmethod
    def from_boxes(cls, boxes) -> "Mesh":
        """Union of boxes given as ``(lo, hi)`` corner pairs in the object frame."""
        verts, tris = [], []
        # two triangles per face, outward winding irrelevant for raycasting
        faces = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
        for lo, hi in boxes:
            lo, hi = np.asarray(lo, float), np.asarray(hi, float)
            base = len(verts)
            for i in range(8):
                verts.append([hi[0] if i & 1 else lo[0], hi[1] if i & 2 else lo[1],
                              hi[2] if i & 4 else lo[2]])
            for a, b, c, d in faces:
                tris.append([base + a, base + b, base + c])
                tris.append([base + a, base + c, base + d])
        return cls(np.array(verts), np.array(tris))


def _geometry_from_dict(d):
    if d["type"] == "box":
        return Box(d["size"])
    if d["type"] == "mesh":
        return Mesh(d["vertices"], d["triangles"])
    raise ValueError(f"unknown geometry type {d['type']!r}")


@dataclass(frozen=True, eq=False)
class SceneObject:
    object_id: int
    semantic: SemanticClass
    geometry: Box | Mesh
    pose: Pose = field(default_factory=Pose)

    def world_bounds(self):
        lo, hi = self.geometry.local_bounds()
        corners = np.array([[hi[0] if i & 1 else lo[0], hi[1] if i & 2 else lo[1],
                             hi[2] if i & 4 else lo[2]] for i in range(8)])
        w = self.pose.apply(corners)
        return w.min(axis=0), w.max(axis=0)

    def to_dict(self):
        return {"id": int(self.object_id), "class": SemanticClass(self.semantic).label,
                "geometry": self.geometry.to_dict(), "pose": self.pose.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["id"]), SemanticClass.from_name(d["class"]),
                   _geometry_from_dict(d["geometry"]), Pose.from_dict(d["pose"]))


@dataclass(frozen=True)
class Room:
    lo: tuple
    hi: tuple
    height: float

    def contains_xy(self, xy, margin=0.0) -> bool:
        return (self.lo[0] + margin <= xy[0] <= self.hi[0] - margin
                and self.lo[1] + margin <= xy[1] <= self.hi[1] - margin)


@dataclass(frozen=True, eq=False)
class Scene:
    objects: tuple
    bounds_lo: np.ndarray
    bounds_hi: np.ndarray
    rooms: tuple = ()
    doors: tuple = ()  # doorway centres (x, y) at floor level
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "rooms", tuple(self.rooms))
        object.__setattr__(self, "doors", tuple(tuple(float(c) for c in d) for d in self.doors))
        ids = [o.object_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique within a scene")
        lo = np.array(self.bounds_lo, dtype=np.float64)
        hi = np.array(self.bounds_hi, dtype=np.float64)
        object.__setattr__(self, "bounds_lo", lo)
        object.__setattr__(self, "bounds_hi", hi)
        for o in self.objects:
            olo, ohi = o.world_bounds()
            if np.any(ohi < lo) or np.any(olo > hi):
                raise ValueError(f"object {o.object_id} lies outside the world bounds")

    def object_by_id(self, object_id: int) -> SceneObject:
        for o in self.objects:
            if o.object_id == object_id:
                return o
        raise KeyError(object_id)

    def class_counts(self) -> dict:
        counts = {}
        for o in self.objects:
            counts[SemanticClass(o.semantic)] = counts.get(SemanticClass(o.semantic), 0) + 1
        return counts

    def contains(self, p) -> bool:
        p = np.asarray(p)
        return bool(np.all(p >= self.bounds_lo) and np.all(p <= self.bounds_hi))

    def to_dict(self):
        return {
            "format": "instaloc-scene", "version": SCENE_FORMAT_VERSION, "seed": self.seed,
            "bounds": {"min": [float(v) for v in self.bounds_lo],
                       "max": [float(v) for v in self.bounds_hi]},
            "rooms": [{"min": list(r.lo), "max": list(r.hi), "height": r.height} for r in self.rooms],
            "doors": [list(d) for d in self.doors],
            "objects": [o.to_dict() for o in self.objects],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != SCENE_FORMAT_VERSION:
            raise ValueError(f"unsupported scene format version {d.get('version')!r}")
        rooms = [Room(tuple(r["min"]), tuple(r["max"]), r["height"]) for r in d.get("rooms", [])]
        return cls([SceneObject.from_dict(o) for o in d["objects"]], d["bounds"]["min"],
                   d["bounds"]["max"], rooms, d.get("doors", []), d.get("seed"))

    @classmethod
    def from_json(cls, text: str) -> "Scene":
        return cls.from_dict(json.loads(text))


# --------------------------------------------------------------------------
# scene generation

@dataclass(frozen=True)
class SceneSpec:
    rooms: int = 3
    furniture_per_room: int = 10
    room_size: tuple = (4.5, 7.0)
    room_height: tuple = (2.7, 3.2)
    wall_thickness: float = 0.1
    corner_columns: bool = True
    column_size: float = 0.4
    place_attempts: int = 100

    def __post_init__(self):
        if self.rooms < 1 or self.furniture_per_room < 0:
            raise ValueError("rooms must be >= 1 and furniture_per_room >= 0")
        if not (0 < self.room_size[0] <= self.room_size[1]) or self.wall_thickness <= 0:
            raise ValueError("room dimensions must be positive")
        if self.place_attempts < 1:
            raise ValueError("place_attempts must be positive")


_DOOR_W, _DOOR_H = 0.9, 2.1
_FLOOR_FURNITURE = [SemanticClass.TABLE, SemanticClass.CHAIR, SemanticClass.CHAIR,
                    SemanticClass.BOOKCASE, SemanticClass.SOFA, SemanticClass.CLUTTER,
                    SemanticClass.COLUMN]
_WALL_FURNITURE = [SemanticClass.WINDOW, SemanticClass.BOARD]


def _box_obj(oid, cls, lo, hi):
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    return SceneObject(oid, cls, Box(hi - lo), Pose(np.eye(3), (lo + hi) / 2))


def _aabb_overlap(a, b, margin=0.0) -> bool:
    return bool(np.all(a[0] < b[1] + margin) and np.all(b[0] < a[1] + margin))


def _furniture_geometry(cls, rng):
    """Object-frame mesh or box for a furniture class plus its footprint on the floor."""
    u = rng.uniform
    if cls == SemanticClass.TABLE:
        w, d, h = u(1.0, 1.8), u(0.6, 1.0), u(0.70, 0.78)
        leg = 0.05
        parts = [((-w / 2, -d / 2, h - 0.04), (w / 2, d / 2, h))]
        for sx in (-1, 1):
            for sy in (-1, 1):
                x, y = sx * (w / 2 - leg), sy * (d / 2 - leg)
                parts.append(((x - leg / 2, y - leg / 2, 0), (x + leg / 2, y + leg / 2, h - 0.04)))
        return Mesh.from_boxes(parts)
    if cls == SemanticClass.CHAIR:
        w, d, sh, bh = u(0.42, 0.55), u(0.42, 0.55), u(0.42, 0.50), u(0.35, 0.55)
        leg = 0.04
        parts = [((-w / 2, -d / 2, sh - 0.05), (w / 2, d / 2, sh)),
                 ((-w / 2, d / 2 - 0.05, sh), (w / 2, d / 2, sh + bh))]
        for sx in (-1, 1):
            for sy in (-1, 1):
                x, y = sx * (w / 2 - leg), sy * (d / 2 - leg)
                parts.append(((x - leg / 2, y - leg / 2, 0), (x + leg / 2, y + leg / 2, sh - 0.05)))
        return Mesh.from_boxes(parts)
    if cls == SemanticClass.SOFA:
        w, d, sh, bh = u(1.4, 2.2), u(0.8, 1.0), u(0.40, 0.48), u(0.35, 0.50)
        parts = [((-w / 2, -d / 2, 0), (w / 2, d / 2, sh)),
                 ((-w / 2, d / 2 - 0.25, sh), (w / 2, d / 2, sh + bh)),
                 ((-w / 2, -d / 2, sh), (-w / 2 + 0.2, d / 2 - 0.25, sh + 0.2)),
                 ((w / 2 - 0.2, -d / 2, sh), (w / 2, d / 2 - 0.25, sh + 0.2))]
        return Mesh.from_boxes(parts)
    if cls == SemanticClass.BOOKCASE:
        w, d, h = u(0.7, 1.3), u(0.3, 0.45), u(1.6, 2.2)
        parts = [((-w / 2, -d / 2, 0), (w / 2, d / 2, h))] if rng.random() < 0.3 else [
            ((-w / 2, d / 2 - 0.03, 0), (w / 2, d / 2, h)),
            ((-w / 2, -d / 2, 0), (-w / 2 + 0.03, d / 2, h)),
            ((w / 2 - 0.03, -d / 2, 0), (w / 2, d / 2, h)),
        ] + [((-w / 2 + 0.03, -d / 2, z), (w / 2 - 0.03, d / 2 - 0.03, z + 0.03))
             for z in np.linspace(0, h - 0.03, int(h / 0.4) + 1)]
        return Mesh.from_boxes(parts)
    if cls == SemanticClass.CLUTTER:
        return Box([u(0.2, 0.7), u(0.2, 0.7), u(0.2, 0.9)])
    if cls == SemanticClass.COLUMN:
        s = u(0.3, 0.5)
        return Box([s, s, 1.0])  # height fixed later to the room height
    raise ValueError(cls)


def generate_scene(seed: int, spec: SceneSpec | None = None) -> Scene:
    """Build a deterministic row of furnished rooms joined by open doorways."""
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    t = spec.wall_thickness
    objects = []
    rooms = []
    doors = []
    next_id = [0]

    def add(obj_fn, *args):
        obj = obj_fn(next_id[0], *args)
        next_id[0] += 1
        objects.append(obj)
        return obj

    sizes = [(rng.uniform(*spec.room_size), rng.uniform(*spec.room_size),
              rng.uniform(*spec.room_height)) for _ in range(spec.rooms)]
    x = 0.0
    extents = []
    for w, d, h in sizes:
        extents.append((x, x + w, 0.0, d, h))
        x += w + 2 * t
    # doorway y-position on each shared wall, inside both rooms' depth
    door_y = []
    for i in range(spec.rooms - 1):
        depth = min(extents[i][3], extents[i + 1][3])
        lo = spec.column_size + 0.3
        door_y.append(rng.uniform(lo, depth - lo - _DOOR_W))

    for r, (x0, x1, y0, y1, h) in enumerate(extents):
        rooms.append(Room((x0, y0), (x1, y1), h))
        add(_box_obj, SemanticClass.FLOOR, (x0 - t, y0 - t, -t), (x1 + t, y1 + t, 0))
        add(_box_obj, SemanticClass.CEILING, (x0 - t, y0 - t, h), (x1 + t, y1 + t, h + t))
        add(_box_obj, SemanticClass.WALL, (x0, y0 - t, 0), (x1, y0, h))   # south
        add(_box_obj, SemanticClass.WALL, (x0, y1, 0), (x1, y1 + t, h))   # north
        for side, xa, xb in (("west", x0 - t, x0), ("east", x1, x1 + t)):
            door_idx = r - 1 if side == "west" else r
            if 0 <= door_idx < spec.rooms - 1:
                yd = door_y[door_idx]
                parts = [((xa, y0 - t, 0), (xb, yd, h)),
                         ((xa, yd + _DOOR_W, 0), (xb, y1 + t, h)),
                         ((xa, yd, _DOOR_H), (xb, yd + _DOOR_W, h))]
                add(lambda oid: SceneObject(oid, SemanticClass.WALL, Mesh.from_boxes(parts)))
            else:
                add(_box_obj, SemanticClass.WALL, (xa, y0 - t, 0), (xb, y1 + t, h))
        if r < spec.rooms - 1:
            doors.append((x1 + t, door_y[r] + _DOOR_W / 2))
        occupied = []  # world AABBs that furniture must not overlap
        if spec.corner_columns:
            c = spec.column_size
            for cx, cy in ((x0, y0), (x1 - c, y0), (x0, y1 - c), (x1 - c, y1 - c)):
                o = add(_box_obj, SemanticClass.COLUMN, (cx, cy, 0), (cx + c, cy + c, h))
                occupied.append(o.world_bounds())
        # keep doorways and a walkway in front of them clear
        for dx, dy in doors[-1:] + ([doors[r - 1]] if r > 0 else []):
            occupied.append((np.array([dx - 1.3, dy - _DOOR_W / 2 - 0.3, 0]),
                             np.array([dx + 1.3, dy + _DOOR_W / 2 + 0.3, _DOOR_H])))
        if r > 0:
            # open door leaf swung into the room, hinged on the doorway's south jamb
            yd = door_y[r - 1]
            add(_box_obj, SemanticClass.DOOR, (x0 + 0.01, yd - 0.05, 0.01),
                (x0 + 0.01 + _DOOR_W, yd - 0.01, _DOOR_H - 0.01))
            occupied.append(objects[-1].world_bounds())
        _furnish(add, occupied, rng, spec, (x0, x1, y0, y1, h))

    lo = np.array([-2 * t, -2 * t, -2 * t])
    hi = np.array([x, max(e[3] for e in extents) + 2 * t, max(e[4] for e in extents) + 2 * t])
    return Scene(objects, lo, hi, rooms, doors, seed)


def _furnish(add, occupied, rng, spec, extent):
    x0, x1, y0, y1, h = extent
    n = spec.furniture_per_room
    if n == 0:
        return
    # one beam across some rooms, under the ceiling
    n_wall = max(1, n // 4)
    kinds = [_FLOOR_FURNITURE[int(rng.integers(len(_FLOOR_FURNITURE)))] for _ in range(n - n_wall)]
    kinds += [_WALL_FURNITURE[int(rng.integers(len(_WALL_FURNITURE)))] for _ in range(n_wall)]
    # large wall-hugging pieces first, small clutter last
    order = {SemanticClass.SOFA: 0, SemanticClass.BOOKCASE: 1, SemanticClass.TABLE: 2}
    kinds.sort(key=lambda c: order.get(c, 3))
    if rng.random() < 0.5:
        yb = rng.uniform(y0 + 1.0, y1 - 1.0)
        bw, bd = rng.uniform(0.2, 0.35), rng.uniform(0.2, 0.35)
        o = add(_box_obj, SemanticClass.BEAM, (x0, yb - bw / 2, h - bd), (x1, yb + bw / 2, h))
        occupied.append(o.world_bounds())
    for cls in kinds:
        for _ in range(spec.place_attempts):
            placed = _try_place(cls, rng, extent, occupied)
            if placed is not None:
                geom, pose = placed
                o = add(lambda oid: SceneObject(oid, cls, geom, pose))
                occupied.append(o.world_bounds())
                break
        else:
            raise SceneGenerationError(
                f"could not place {cls.label} without overlap after {spec.place_attempts} attempts")


def _try_place(cls, rng, extent, occupied):
    x0, x1, y0, y1, h = extent
    if cls in _WALL_FURNITURE:
        w = rng.uniform(1.0, 1.8) if cls == SemanticClass.WINDOW else rng.uniform(1.2, 2.4)
        hh = rng.uniform(1.0, 1.4) if cls == SemanticClass.WINDOW else rng.uniform(0.9, 1.2)
        depth = 0.04 if cls == SemanticClass.WINDOW else 0.02
        z = rng.uniform(0.8, 1.1)
        side = int(rng.integers(4))
        geom = Box([w, depth, hh])
        if side in (0, 1):
            if x1 - x0 < w + 1.2:
                return None
            cx = rng.uniform(x0 + 0.6 + w / 2, x1 - 0.6 - w / 2)
            cy = y0 + depth / 2 if side == 0 else y1 - depth / 2
            R = np.eye(3)
        else:
            if y1 - y0 < w + 1.2:
                return None
            cy = rng.uniform(y0 + 0.6 + w / 2, y1 - 0.6 - w / 2)
            cx = x0 + depth / 2 if side == 2 else x1 - depth / 2
            R = rot_z(math.pi / 2)
        pose = Pose(R, np.array([cx, cy, z + hh / 2]))
    else:
        geom = _furniture_geometry(cls, rng)
        if cls == SemanticClass.COLUMN:
            geom = Box([geom.size[0], geom.size[1], h])
        R = rot_z(math.pi / 2 * int(rng.integers(4)))
        lo, hi = geom.local_bounds()
        if cls == SemanticClass.COLUMN or isinstance(geom, Box):
            z = -lo[2]  # box centred on origin: lift onto the floor
        else:
            z = 0.0
        half = np.abs(R[:2, :2]) @ ((hi - lo)[:2] / 2)
        against_wall = cls in (SemanticClass.BOOKCASE, SemanticClass.SOFA)
        if against_wall:
            # back of the object (+y in its frame) faces the nearest wall
            side = int(rng.integers(4))
            R = rot_z([math.pi, 0.0, math.pi / 2, -math.pi / 2][side])
            half = np.abs(R[:2, :2]) @ ((hi - lo)[:2] / 2)
            gap = 0.02
            if side == 0:
                cx, cy = rng.uniform(x0 + half[0], x1 - half[0]), y0 + half[1] + gap
            elif side == 1:
                cx, cy = rng.uniform(x0 + half[0], x1 - half[0]), y1 - half[1] - gap
            elif side == 2:
                cx, cy = x0 + half[0] + gap, rng.uniform(y0 + half[1], y1 - half[1])
            else:
                cx, cy = x1 - half[0] - gap, rng.uniform(y0 + half[1], y1 - half[1])
        else:
            if x1 - x0 < 2 * half[0] + 0.2 or y1 - y0 < 2 * half[1] + 0.2:
                return None
            cx = rng.uniform(x0 + half[0] + 0.1, x1 - half[0] - 0.1)
            cy = rng.uniform(y0 + half[1] + 0.1, y1 - half[1] - 0.1)
        # mesh frames sit on z=0; recentre their xy footprint on (cx, cy)
        mid = (lo + hi) / 2
        t = np.array([cx, cy, z]) - R @ np.array([mid[0], mid[1], 0.0])
        pose = Pose(R, t)
    obj = SceneObject(-1, cls, geom, pose)
    bounds = obj.world_bounds()
    margin = 0.05 if cls in _WALL_FURNITURE else 0.15
    for other in occupied:
        if _aabb_overlap(bounds, other, margin):
            return None
    return geom, pose


# --------------------------------------------------------------------------
# lidar

@dataclass(frozen=True)
class LidarConfig:
    beams: int = 128
    vfov: float = math.pi / 2
    horizontal_resolution: int = 512
    max_range: float = 50.0
    range_noise: float = 0.01

    def __post_init__(self):
        if self.beams < 2:
            raise ValueError("beam count must be at least 2")
        if not 0 < self.vfov < math.pi:
            raise ValueError("vertical field of view must lie in (0, pi)")
        if not self.max_range > 0 or self.horizontal_resolution < 1 or self.range_noise < 0:
            raise ValueError("invalid lidar range settings")

    def to_dict(self):
        return {"beams": self.beams, "vfov": self.vfov,
                "horizontal_resolution": self.horizontal_resolution,
                "max_range": self.max_range, "range_noise": self.range_noise}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["beams"]), float(d["vfov"]), int(d["horizontal_resolution"]),
                   float(d["max_range"]), float(d["range_noise"]))

    def ray_directions(self) -> np.ndarray:
        """Unit rays in the sensor frame, ordered by beam (bottom up) then azimuth."""
        elev = np.linspace(-self.vfov / 2, self.vfov / 2, self.beams)
        az = 2 * math.pi * np.arange(self.horizontal_resolution) / self.horizontal_resolution
        el, a = np.meshgrid(elev, az, indexing="ij")
        return np.stack([np.cos(el) * np.cos(a), np.cos(el) * np.sin(a), np.sin(el)],
                        axis=-1).reshape(-1, 3)


@dataclass(frozen=True, eq=False)
class LabeledScan:
    """Sensor-frame points with per-point class and object id."""

    points: np.ndarray
    semantic: np.ndarray
    instance: np.ndarray
    sensor_pose: Pose = field(default_factory=Pose)
    lidar: LidarConfig = field(default_factory=LidarConfig)
    scan_id: int = 0

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        sem = np.array(self.semantic, dtype=np.int64).reshape(-1)
        inst = np.array(self.instance, dtype=np.int64).reshape(-1)
        if not (len(pts) == len(sem) == len(inst)):
            raise ValueError("semantic and instance labels need one entry per point")
        if len(sem) and (sem.min() < 0 or sem.max() >= NUM_CLASSES):
            raise ValueError("semantic label out of range")
        for a in (pts, sem, inst):
            a.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "semantic", sem)
        object.__setattr__(self, "instance", inst)

    def __len__(self):
        return len(self.points)

    @property
    def origin(self) -> np.ndarray:
        return np.zeros(3)

    @property
    def cloud(self) -> PointCloud:
        return PointCloud(self.points, self.origin)

    def ranges(self) -> np.ndarray:
        return np.linalg.norm(self.points, axis=1)

    def world_points(self) -> np.ndarray:
        return self.sensor_pose.apply(self.points)

    def with_labels(self, semantic=None, instance=None) -> "LabeledScan":
        return replace(self, semantic=self.semantic if semantic is None else semantic,
                       instance=self.instance if instance is None else instance)

    def __eq__(self, other):
        if not isinstance(other, LabeledScan):
            return NotImplemented
        return (np.array_equal(self.points, other.points)
                and np.array_equal(self.semantic, other.semantic)
                and np.array_equal(self.instance, other.instance)
                and self.sensor_pose == other.sensor_pose and self.lidar == other.lidar
                and self.scan_id == other.scan_id)


def _slab_hits(origin, dirs, lo, hi):
    """Entry distance of each ray into the box [lo, hi] (inf on a miss)."""
    # zero components would give inf * 0 = nan; a tiny step keeps the slab test exact
    d = np.where(np.abs(dirs) < 1e-300, 1e-300, dirs)
    inv = 1.0 / d
    t1 = (lo - origin) * inv
    t2 = (hi - origin) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_near = np.maximum(np.maximum(tmin[:, 0], tmin[:, 1]), tmin[:, 2])
    t_far = np.minimum(np.minimum(tmax[:, 0], tmax[:, 1]), tmax[:, 2])
    hit = (t_near <= t_far) & (t_near > 1e-9)
    return np.where(hit, t_near, np.inf)


def _triangle_hits(origin, dirs, verts, tris, chunk=4096):
    """Nearest positive Moller-Trumbore hit over all triangles (inf on a miss)."""
    v0 = verts[tris[:, 0]]
    e1 = verts[tris[:, 1]] - v0
    e2 = verts[tris[:, 2]] - v0
    s = origin - v0
    q = np.cross(s, e1)
    t_num = np.einsum("tk,tk->t", q, e2)
    out = np.empty(len(dirs))
    for a in range(0, len(dirs), chunk):
        d = dirs[a:a + chunk]
        pvec = np.cross(d[:, None, :], e2[None, :, :])
        det = np.einsum("mtk,tk->mt", pvec, e1)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / det
            u = np.einsum("mtk,tk->mt", pvec, s) * inv
            v = (d @ q.T) * inv
            t = t_num[None, :] * inv
            ok = (np.abs(det) > 1e-12) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 1e-9)
        out[a:a + chunk] = np.where(ok, t, np.inf).min(axis=1)
    return out


def _object_hits(obj: SceneObject, origin_w, dirs_w, cand=None):
    R, t = obj.pose.rotation, obj.pose.translation
    o = R.T @ (origin_w - t)
    lo, hi = obj.geometry.local_bounds()
    out = np.full(len(dirs_w), np.inf)
    if cand is None:
        cand = np.arange(len(dirs_w))
    if not len(cand):
        return out
    d = dirs_w[cand] @ R
    if isinstance(obj.geometry, Box):
        out[cand] = _slab_hits(o, d, lo, hi)
        return out
    box_t = _slab_hits(o, d, lo - 1e-9, hi + 1e-9)
    inside = np.all((o >= lo) & (o <= hi))
    sub = np.arange(len(d)) if inside else np.flatnonzero(np.isfinite(box_t))
    if len(sub):
        out[cand[sub]] = _triangle_hits(o, d[sub], obj.geometry.vertices, obj.geometry.triangles)
    return out


def _candidate_rays(obj: SceneObject, origin_w, dirs_w):
    """Rays that can reach the object's bounding sphere; None means all rays."""
    lo, hi = obj.world_bounds()
    centre = (lo + hi) / 2
    radius = float(np.linalg.norm(hi - lo)) / 2 + 1e-6
    offset = centre - origin_w
    dist = float(np.linalg.norm(offset))
    if dist <= radius * 1.05:
        return None
    cos_lim = math.sqrt(1.0 - (radius / dist) ** 2)
    return np.flatnonzero(dirs_w @ (offset / dist) >= cos_lim - 1e-9)


def raycast_scan(scene: Scene, sensor_pose: Pose, config: LidarConfig | None = None,
                 seed: int = 0, scan_id: int = 0) -> LabeledScan:
    """Cast one ray per (beam, azimuth) and keep the nearest hit within range.

    Points are ordered by beam, then azimuth; misses are dropped.
    """
    config = config or LidarConfig()
    if not scene.contains(sensor_pose.translation):
        raise ValueError("sensor must lie inside the scene bounds")
    dirs_s = config.ray_directions()
    dirs_w = dirs_s @ sensor_pose.rotation.T
    origin = sensor_pose.translation
    best = np.full(len(dirs_s), np.inf)
    label = np.full(len(dirs_s), -1, dtype=np.int64)
    for k, obj in enumerate(scene.objects):
        t = _object_hits(obj, origin, dirs_w, _candidate_rays(obj, origin, dirs_w))
        closer = t < best
        best[closer] = t[closer]
        label[closer] = k
    keep = np.isfinite(best) & (best <= config.max_range)
    ranges = best[keep]
    if config.range_noise > 0:
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, config.range_noise, size=len(dirs_s))[keep]
        ranges = np.clip(ranges + noise, 0.0, config.max_range)
    objs = label[keep]
    sem = np.array([int(o.semantic) for o in scene.objects], dtype=np.int64)
    ids = np.array([o.object_id for o in scene.objects], dtype=np.int64)
    return LabeledScan(dirs_s[keep] * ranges[:, None],
                       sem[objs] if len(objs) else np.zeros(0, np.int64),
                       ids[objs] if len(objs) else np.zeros(0, np.int64),
                       sensor_pose, config, scan_id)


def perturb_labels(scan: LabeledScan, flip_rate: float, seed: int = 0) -> LabeledScan:
    """Replace each semantic label by a uniform random class with probability ``flip_rate``."""
    if not 0.0 <= flip_rate <= 1.0:
        raise ValueError("flip rate must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n = len(scan)
    flip = rng.random(n) < flip_rate
    new = rng.integers(0, NUM_CLASSES, size=n)
    return scan.with_labels(semantic=np.where(flip, new, scan.semantic))


# --------------------------------------------------------------------------
# free space and triplets

def _floor_obstacles(scene: Scene):
    skip = {SemanticClass.FLOOR, SemanticClass.CEILING, SemanticClass.BEAM,
            SemanticClass.WALL, SemanticClass.WINDOW, SemanticClass.BOARD}
    return [o.world_bounds() for o in scene.objects if SemanticClass(o.semantic) not in skip]


def is_free(scene: Scene, xy, clearance: float = 0.35, _obstacles=None) -> bool:
    """True when a sensor standing at ``xy`` is inside a room and clear of furniture."""
    if not any(r.contains_xy(xy, clearance) for r in scene.rooms):
        return False
    obstacles = _floor_obstacles(scene) if _obstacles is None else _obstacles
    for lo, hi in obstacles:
        if (lo[0] - clearance <= xy[0] <= hi[0] + clearance
                and lo[1] - clearance <= xy[1] <= hi[1] + clearance):
            return False
    return True


def segment_is_free(scene: Scene, a, b, clearance: float = 0.35, step: float = 0.05,
                    _obstacles=None) -> bool:
    """Free-space check along a straight walk, allowing passage through doorways."""
    obstacles = _floor_obstacles(scene) if _obstacles is None else _obstacles
    a, b = np.asarray(a, float), np.asarray(b, float)
    n = max(2, int(math.ceil(np.linalg.norm(b - a) / step)) + 1)
    for s in np.linspace(0, 1, n):
        p = a + s * (b - a)
        if is_free(scene, p, clearance, obstacles):
            continue
        if _in_doorway(scene, p):
            continue
        return False
    return True


def _in_doorway(scene: Scene, p, half_len: float = 0.5) -> bool:
    for dx, dy in scene.doors:
        if abs(p[0] - dx) <= half_len and abs(p[1] - dy) <= _DOOR_W / 2 - 0.15:
            return True
    return False


def sample_free_pose(scene: Scene, rng: np.random.Generator, clearance: float = 0.35,
                     attempts: int = 1000, height: float = SENSOR_HEIGHT) -> Pose:
    obstacles = _floor_obstacles(scene)
    for _ in range(attempts):
        room = scene.rooms[int(rng.integers(len(scene.rooms)))]
        xy = rng.uniform(room.lo, room.hi)
        if is_free(scene, xy, clearance, obstacles):
            return Pose.from_yaw(rng.uniform(-math.pi, math.pi), (xy[0], xy[1], height))
    raise RuntimeError("no free sensor pose found")


@dataclass(frozen=True, eq=False)
class TripletSample:
    anchor: ObjectInstance
    positive: ObjectInstance
    negative: ObjectInstance
    anchor_object: int
    negative_object: int
    anchor_pose: Pose
    positive_pose: Pose


def scan_object_instances(scan: LabeledScan, voxel_size: float = 0.02,
                          min_points: int = 50) -> dict[int, ObjectInstance]:
    """Ground-truth instances of a scan keyed by object id, after voxel downsampling."""
    grid = voxel_downsample(scan.points, voxel_size, scan.semantic, scan.instance)
    out = {}
    for obj in np.unique(grid.instance):
        members = np.flatnonzero(grid.instance == obj)
        if len(members) < min_points:
            continue
        cls = int(np.bincount(grid.semantic[members], minlength=NUM_CLASSES).argmax())
        out[int(obj)] = ObjectInstance(grid.points[members], cls, scan.scan_id, int(obj))
    return out


def generate_triplets(scene: Scene, config: LidarConfig | None, count: int, seed: int,
                      offset: float = 2.0, yaw_offset_deg: float = 10.0,
                      voxel_size: float = 0.02, min_points: int = 50,
                      per_pair: int = 8, max_viewpoints: int | None = None) -> list[TripletSample]:
    """Anchor/positive/negative instances from scan pairs 2 m and 10 degrees apart.

    The second sensor is displaced by ``offset`` metres in a random horizontal
    direction and rotated by ``yaw_offset_deg`` about the vertical axis.
    """
    config = config or LidarConfig()
    rng = np.random.default_rng(seed)
    budget = max_viewpoints if max_viewpoints is not None else max(20, count)
    obstacles = _floor_obstacles(scene)
    out: list[TripletSample] = []
    yaw_step = math.radians(yaw_offset_deg)
    for view in range(budget):
        if len(out) >= count:
            break
        p1 = sample_free_pose(scene, rng)
        p2 = None
        for _ in range(20):
            phi = rng.uniform(-math.pi, math.pi)
            t2 = p1.translation + offset * np.array([math.cos(phi), math.sin(phi), 0.0])
            if is_free(scene, t2[:2], 0.35, obstacles):
                p2 = Pose(rot_z(yaw_step) @ p1.rotation, t2)
                break
        if p2 is None:
            continue
        s1 = raycast_scan(scene, p1, config, seed=int(rng.integers(2**31)), scan_id=2 * view)
        s2 = raycast_scan(scene, p2, config, seed=int(rng.integers(2**31)), scan_id=2 * view + 1)
        inst1 = scan_object_instances(s1, voxel_size, min_points)
        inst2 = scan_object_instances(s2, voxel_size, min_points)
        common = sorted(set(inst1) & set(inst2))
        if not common or len(inst2) < 2:
            continue
        rng.shuffle(common)
        for obj in common[:per_pair]:
            if len(out) >= count:
                break
            others = sorted(k for k in inst2 if k != obj)
            neg = others[int(rng.integers(len(others)))]
            out.append(TripletSample(inst1[obj], inst2[obj], inst2[neg], obj, neg, p1, p2))
    if len(out) < count:
        raise TripletGenerationError(
            f"only {len(out)} of {count} triplets found within {budget} viewpoints")
    return out
