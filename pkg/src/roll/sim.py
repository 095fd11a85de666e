"""Synthetic LiDAR world: analytic ray casting against boxes, cylinders and
plane patches, smooth reference trajectories, drift-injected odometry, and
scene editing between sessions.

All geometry is exact, so tests can assert that returned points lie on a
primitive surface to floating-point accuracy.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cloud import FrameId, PointCloud
from .errors import InvalidParameter
from .se3 import Pose, compose, inverse, quat_rotate, quat_from_rotvec, se3_exp

_EPS = 1e-12
_T_MIN = 1e-9


@dataclass(eq=False)
class Plane:
    """Rectangular patch (or infinite plane when ``extent`` is None)."""

    point: np.ndarray
    normal: np.ndarray
    extent: float | None = None
    id: int = 0
    tag: str = ""

    def __post_init__(self) -> None:
        self.point = np.asarray(self.point, dtype=float).reshape(3)
        normal = np.asarray(self.normal, dtype=float).reshape(3)
        n = np.linalg.norm(normal)
        if n < _EPS:
            raise InvalidParameter("plane normal must be non-zero")
        self.normal = normal / n
        if self.extent is not None and self.extent <= 0.0:
            raise InvalidParameter("plane extent must be positive or None")

    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        ref = np.array([0.0, 0.0, 1.0])
        if abs(float(self.normal @ ref)) > 0.9:
            ref = np.array([1.0, 0.0, 0.0])
        u = np.cross(self.normal, ref)
        u /= np.linalg.norm(u)
        return u, np.cross(self.normal, u)


@dataclass(eq=False)
class Box:
    """Solid axis-sized box centered at ``pose`` (size = full extents)."""

    pose: Pose
    size: np.ndarray = field(default_factory=lambda: np.ones(3))
    id: int = 0
    tag: str = ""

    def __post_init__(self) -> None:
        self.size = np.asarray(self.size, dtype=float).reshape(3)
        if np.any(self.size <= 0.0):
            raise InvalidParameter("box size must be positive")


@dataclass(eq=False)
class Cylinder:
    """Open tube along local +z from z=0 to z=height, based at ``pose``."""

    pose: Pose
    radius: float = 0.5
    height: float = 1.0
    id: int = 0
    tag: str = ""

    def __post_init__(self) -> None:
        if self.radius <= 0.0 or self.height <= 0.0:
            raise InvalidParameter("cylinder radius and height must be positive")


Primitive = Plane | Box | Cylinder


@dataclass(eq=False)
class World:
    primitives: list[Primitive] = field(default_factory=list)

    def __post_init__(self) -> None:
        ids = [p.id for p in self.primitives]
        if len(set(ids)) != len(ids):
            raise InvalidParameter("primitive ids must be unique")

    def by_id(self, pid: int) -> Primitive:
        for p in self.primitives:
            if p.id == pid:
                return p
        raise InvalidParameter(f"no primitive with id {pid}")


@dataclass
class SensorModel:
    rings: int = 16
    azimuth_steps: int = 900
    max_range: float = 80.0
    min_range: float = 0.5
    min_elevation_deg: float = -15.0
    max_elevation_deg: float = 15.0
    range_noise_sigma: float = 0.0

    def elevations(self) -> np.ndarray:
        return np.radians(np.linspace(self.min_elevation_deg, self.max_elevation_deg, self.rings))

    def directions(self) -> np.ndarray:
        """Unit beam directions in the sensor frame, ring-major then azimuth."""
        elev = self.elevations()
        az = 2.0 * np.pi * np.arange(self.azimuth_steps) / self.azimuth_steps
        ce, se = np.cos(elev), np.sin(elev)
        ca, sa = np.cos(az), np.sin(az)
        dirs = np.empty((self.rings, self.azimuth_steps, 3))
        dirs[:, :, 0] = ce[:, None] * ca[None, :]
        dirs[:, :, 1] = ce[:, None] * sa[None, :]
        dirs[:, :, 2] = se[:, None]
        return dirs.reshape(-1, 3)


@dataclass
class OdomModel:
    """Multiplicative step corruption: per-meter bias plus white noise."""

    drift_per_meter: np.ndarray = field(default_factory=lambda: np.zeros(6))
    noise_sigma: np.ndarray = field(default_factory=lambda: np.zeros(6))
    seed: int = 0

    def __post_init__(self) -> None:
        self.drift_per_meter = np.asarray(self.drift_per_meter, dtype=float).reshape(6)
        self.noise_sigma = np.asarray(self.noise_sigma, dtype=float).reshape(6)


def _intersect_plane(pl: Plane, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    denom = dirs @ pl.normal
    num = float((pl.point - origin) @ pl.normal)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / denom
    t = np.where(np.abs(denom) < _EPS, np.nan, t)
    t = np.where(t > _T_MIN, t, np.nan)
    if pl.extent is not None:
        hit = origin + t[:, None] * dirs - pl.point
        u, v = pl.basis()
        inside = (np.abs(hit @ u) <= pl.extent) & (np.abs(hit @ v) <= pl.extent)
        t = np.where(inside, t, np.nan)
    return t


def _intersect_box(b: Box, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    r = b.pose.rotation_matrix()
    o = r.T @ (origin - b.pose.p)
    d = dirs @ r
    h = b.size / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-h - o) / d
        t2 = (h - o) / d
    lo = np.fmin(t1, t2)
    hi = np.fmax(t1, t2)
    # Rays parallel to an axis miss unless the origin lies inside that slab.
    parallel = np.abs(d) < _EPS
    inside_slab = np.abs(o) <= h
    lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), hi)
    tmin = lo.max(axis=1)
    tmax = hi.min(axis=1)
    # Entry face from the outside, exit face when the ray starts inside.
    t = np.where(tmin > _T_MIN, tmin, tmax)
    valid = (tmax >= tmin) & (t > _T_MIN) & np.isfinite(t)
    return np.where(valid, t, np.nan)


def _intersect_cylinder(cy: Cylinder, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    r = cy.pose.rotation_matrix()
    o = r.T @ (origin - cy.pose.p)
    d = dirs @ r
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    bq = 2.0 * (o[0] * d[:, 0] + o[1] * d[:, 1])
    cq = o[0] ** 2 + o[1] ** 2 - cy.radius ** 2
    disc = bq * bq - 4.0 * a * cq
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = np.sqrt(np.where(disc >= 0.0, disc, np.nan))
        t_near = (-bq - sq) / (2.0 * a)
        t_far = (-bq + sq) / (2.0 * a)

    def side_ok(t: np.ndarray) -> np.ndarray:
        z = o[2] + t * d[:, 2]
        return (t > _T_MIN) & (z >= 0.0) & (z <= cy.height)

    t = np.where(side_ok(t_near), t_near, np.where(side_ok(t_far), t_far, np.nan))
    return np.where(a < _EPS, np.nan, t)


def _intersect(prim: Primitive, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    if isinstance(prim, Plane):
        return _intersect_plane(prim, origin, dirs)
    if isinstance(prim, Box):
        return _intersect_box(prim, origin, dirs)
    return _intersect_cylinder(prim, origin, dirs)


def surface_distance(prim: Primitive, point: np.ndarray) -> float:
    """Exact distance from a point to the primitive surface, used as the
    oracle for ray-cast exactness."""
    point = np.asarray(point, dtype=float).reshape(3)
    if isinstance(prim, Plane):
        rel = point - prim.point
        dn = float(rel @ prim.normal)
        if prim.extent is None:
            return abs(dn)
        u, v = prim.basis()
        eu = max(0.0, abs(float(rel @ u)) - prim.extent)
        ev = max(0.0, abs(float(rel @ v)) - prim.extent)
        return math.sqrt(dn * dn + eu * eu + ev * ev)
    if isinstance(prim, Box):
        local = prim.pose.rotation_matrix().T @ (point - prim.pose.p)
        d = np.abs(local) - prim.size / 2.0
        outside = float(np.linalg.norm(np.maximum(d, 0.0)))
        inside = min(float(d.max()), 0.0)
        return abs(outside + inside)
    local = prim.pose.rotation_matrix().T @ (point - prim.pose.p)
    radial = abs(math.hypot(local[0], local[1]) - prim.radius)
    dz = max(0.0, -local[2], local[2] - prim.height)
    return math.hypot(radial, dz)


def world_surface_distance(world: World, point: np.ndarray) -> float:
    return min(surface_distance(p, point) for p in world.primitives)


def raycast_scan(
    world: World,
    sensor: SensorModel,
    pose: Pose,
    timestamp: float = 0.0,
    seed: int | None = None,
) -> tuple[PointCloud, np.ndarray]:
    """Cast the full beam grid from ``pose``; returns the hit points in the
    sensor frame (ring-major, azimuth-ordered, misses omitted) and the start
    index of each non-empty ring."""
    dirs_sensor = sensor.directions()
    rot = pose.rotation_matrix()
    dirs_world = dirs_sensor @ rot.T
    origin = pose.p

    t_all = np.full(dirs_world.shape[0], np.inf)
    for prim in world.primitives:
        t = _intersect(prim, origin, dirs_world)
        t_all = np.fmin(t_all, np.where(np.isnan(t), np.inf, t))

    hit = np.isfinite(t_all) & (t_all >= sensor.min_range) & (t_all <= sensor.max_range)
    t_meas = t_all.copy()
    if sensor.range_noise_sigma > 0.0:
        rng = np.random.default_rng(seed if seed is not None else 0)
        t_meas = t_all + rng.normal(0.0, sensor.range_noise_sigma, t_all.shape)

    points = dirs_sensor[hit] * t_meas[hit, None]
    per_ring = hit.reshape(sensor.rings, sensor.azimuth_steps).sum(axis=1)
    nonzero = per_ring > 0
    starts = np.concatenate([[0], np.cumsum(per_ring[nonzero])[:-1]]).astype(int)
    return PointCloud(points, timestamp, FrameId.LIDAR), starts


def make_trajectory(kind: str, **params) -> list[tuple[float, Pose]]:
    """Smooth sampled trajectory; ``kind`` is one of loop, corridor, figure8."""
    speed = float(params.get("speed", 1.0))
    rate = float(params.get("rate", 10.0))
    height = float(params.get("height", 1.5))
    if speed <= 0.0 or rate <= 0.0:
        raise InvalidParameter("speed and rate must be positive")

    def pose_at(x: float, y: float, yaw: float) -> Pose:
        return Pose(np.array([x, y, height]), quat_from_rotvec(np.array([0.0, 0.0, yaw])))

    if kind == "loop":
        radius = float(params.get("radius", 20.0))
        cx, cy = params.get("center", (0.0, 0.0))
        start = float(params.get("start_angle", 0.0))
        span = float(params.get("span", 2.0 * np.pi))
        if radius <= 0.0 or span <= 0.0:
            raise InvalidParameter("loop radius and span must be positive")
        n = max(2, int(round(span * radius * rate / speed)))
        out = []
        for k in range(n):
            th = start + span * k / n
            out.append((k / rate, pose_at(cx + radius * np.cos(th), cy + radius * np.sin(th), th + np.pi / 2.0)))
        return out

    if kind == "corridor":
        length = float(params.get("length", 30.0))
        heading = float(params.get("heading", 0.0))
        sx, sy = params.get("start", (0.0, 0.0))
        if length <= 0.0:
            raise InvalidParameter("corridor length must be positive")
        n = int(round(length * rate / speed)) + 1
        dx, dy = np.cos(heading), np.sin(heading)
        return [
            (k / rate, pose_at(sx + dx * k * speed / rate, sy + dy * k * speed / rate, heading))
            for k in range(n)
        ]

    if kind == "figure8":
        radius = float(params.get("radius", 10.0))
        cx, cy = params.get("center", (0.0, 0.0))
        if radius <= 0.0:
            raise InvalidParameter("figure8 radius must be positive")
        total = 4.0 * np.pi * radius
        n = max(2, int(round(total * rate / speed)))
        out = []
        for k in range(n):
            s = total * k / n
            if s < 2.0 * np.pi * radius:
                th = s / radius
                x = cx + radius * np.sin(th)
                y = cy + radius * (1.0 - np.cos(th))
                yaw = th
            else:
                th = (s - 2.0 * np.pi * radius) / radius
                x = cx + radius * np.sin(th)
                y = cy - radius * (1.0 - np.cos(th))
                yaw = -th
            out.append((k / rate, pose_at(x, y, yaw)))
        return out

    raise InvalidParameter(f"unknown trajectory kind {kind!r}")


def drift_odometry(truth: list[tuple[float, Pose]], model: OdomModel) -> list[tuple[float, Pose]]:
    """Integrate truth steps corrupted by per-meter bias and white noise.

    The first odometry pose is the identity: odometry lives in its own frame.
    """
    rng = np.random.default_rng(model.seed)
    out: list[tuple[float, Pose]] = []
    cur = Pose.identity()
    for k, (t, pose) in enumerate(truth):
        if k == 0:
            out.append((t, cur))
            continue
        step = compose(inverse(truth[k - 1][1]), pose)
        dist = float(np.linalg.norm(step.p))
        xi = model.drift_per_meter * dist + model.noise_sigma * rng.normal(size=6)
        cur = compose(cur, compose(step, se3_exp(xi)))
        out.append((t, cur))
    return out


@dataclass
class SceneChange:
    """One edit: ``remove`` (by id or tag), ``add`` (new primitive) or
    ``move`` (existing id by a world-frame delta pose)."""

    op: str
    id: int | None = None
    tag: str | None = None
    primitive: Primitive | None = None
    delta: Pose | None = None


def apply_scene_change(world: World, change: SceneChange) -> World:
    prims = list(world.primitives)
    if change.op == "remove":
        if change.id is not None:
            keep = [p for p in prims if p.id != change.id]
            if len(keep) == len(prims):
                raise InvalidParameter(f"no primitive with id {change.id}")
        elif change.tag is not None:
            keep = [p for p in prims if p.tag != change.tag]
            if len(keep) == len(prims):
                raise InvalidParameter(f"no primitive with tag {change.tag!r}")
        else:
            raise InvalidParameter("remove needs an id or a tag")
        return World(keep)
    if change.op == "add":
        if change.primitive is None:
            raise InvalidParameter("add needs a primitive")
        return World(prims + [change.primitive])
    if change.op == "move":
        if change.id is None or change.delta is None:
            raise InvalidParameter("move needs an id and a delta pose")
        target = world.by_id(change.id)
        moved: Primitive
        if isinstance(target, Plane):
            moved = replace(
                target,
                point=change.delta.p + quat_rotate(change.delta.q, target.point),
                normal=quat_rotate(change.delta.q, target.normal),
            )
        else:
            moved = replace(target, pose=compose(change.delta, target.pose))
        return World([moved if p.id == change.id else p for p in prims])
    raise InvalidParameter(f"unknown scene change op {change.op!r}")


# --- JSON serialization -----------------------------------------------------

def primitive_to_json(p: Primitive) -> dict:
    if isinstance(p, Plane):
        return {
            "type": "plane",
            "id": p.id,
            "tag": p.tag,
            "point": list(p.point),
            "normal": list(p.normal),
            "extent": p.extent,
        }
    if isinstance(p, Box):
        return {
            "type": "box",
            "id": p.id,
            "tag": p.tag,
            "center": list(p.pose.p),
            "rotvec": list(_rotvec_of(p.pose)),
            "size": list(p.size),
        }
    return {
        "type": "cylinder",
        "id": p.id,
        "tag": p.tag,
        "base": list(p.pose.p),
        "rotvec": list(_rotvec_of(p.pose)),
        "radius": p.radius,
        "height": p.height,
    }


def _rotvec_of(pose: Pose) -> np.ndarray:
    from .se3 import rotvec_from_quat

    return rotvec_from_quat(pose.q)


def _pose_from_json(obj: dict, key: str) -> Pose:
    p = np.asarray(obj.get(key, [0.0, 0.0, 0.0]), dtype=float)
    if "yaw" in obj:
        rv = np.array([0.0, 0.0, float(obj["yaw"])])
    else:
        rv = np.asarray(obj.get("rotvec", [0.0, 0.0, 0.0]), dtype=float)
    return Pose(p, quat_from_rotvec(rv))


def primitive_from_json(obj: dict) -> Primitive:
    kind = obj.get("type")
    pid = int(obj.get("id", 0))
    tag = obj.get("tag", "")
    if kind == "plane":
        return Plane(obj["point"], obj["normal"], obj.get("extent"), pid, tag)
    if kind == "box":
        return Box(_pose_from_json(obj, "center"), obj["size"], pid, tag)
    if kind == "cylinder":
        return Cylinder(_pose_from_json(obj, "base"), float(obj["radius"]), float(obj["height"]), pid, tag)
    raise InvalidParameter(f"unknown primitive type {kind!r}")


def world_to_json(world: World) -> list[dict]:
    return [primitive_to_json(p) for p in world.primitives]


def world_from_json(objs: list[dict]) -> World:
    return World([primitive_from_json(o) for o in objs])


def save_world(path: str | Path, world: World) -> None:
    Path(path).write_text(json.dumps(world_to_json(world), indent=2) + "\n")


def load_world(path: str | Path) -> World:
    return world_from_json(json.loads(Path(path).read_text()))


def scene_change_from_json(obj: dict) -> SceneChange:
    delta = None
    if "delta" in obj:
        d = obj["delta"]
        delta = _pose_from_json(d, "p") if isinstance(d, dict) else Pose(np.asarray(d, dtype=float))
    prim = primitive_from_json(obj["primitive"]) if "primitive" in obj else None
    return SceneChange(obj["op"], obj.get("id"), obj.get("tag"), prim, delta)
