"""Keyframe map: global store of feature keyframes, local map assembly
around a pose guess, temporary-keyframe merging, and the binary map format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import (
    FrameId,
    PointCloud,
    SpatialIndex,
    parse_scan_block,
    scan_block_bytes,
    voxel_downsample,
)
from .errors import CorruptMap, InvalidParameter, MalformedScan, NoNearbyKeyframes
from .features import FeatureFrame
from .se3 import Pose, relative, rotation_angle

MAP_MAGIC = b"RLMP"
MAP_VERSION = 1

# Keyframes created by the initial map build carry provenance 0; keyframes
# merged from a temporary-mapping session carry that session's id (>= 1).
PROVENANCE_INITIAL = 0


@dataclass(eq=False)
class Keyframe:
    id: int
    obs_pose: Pose
    features: FeatureFrame
    leaf: float
    provenance: int = PROVENANCE_INITIAL


@dataclass(eq=False)
class MergeReport:
    removed_ids: list[int] = field(default_factory=list)
    added_ids: list[int] = field(default_factory=list)


@dataclass(eq=False)
class LocalMap:
    """Downsampled union of nearby keyframes, in the map frame, with search
    indexes. Either feature index may be None when that class is empty."""

    edge_cloud: PointCloud
    surf_cloud: PointCloud
    edge_index: SpatialIndex | None
    surf_index: SpatialIndex | None
    source_ids: list[int]
    center: np.ndarray
    leaf: float


class GlobalMap:
    """Keyframes keyed by id; ``version`` bumps on every mutation so cached
    local maps can detect staleness."""

    def __init__(self) -> None:
        self._frames: dict[int, Keyframe] = {}
        self._next_id = 0
        self.version = 0

    def __len__(self) -> int:
        return len(self._frames)

    def __contains__(self, kid: int) -> bool:
        return kid in self._frames

    def __getitem__(self, kid: int) -> Keyframe:
        return self._frames[kid]

    def keyframes(self) -> list[Keyframe]:
        return [self._frames[k] for k in sorted(self._frames)]

    def allocate_id(self) -> int:
        kid = self._next_id
        self._next_id += 1
        return kid

    def insert(self, kf: Keyframe) -> None:
        if kf.id in self._frames:
            raise InvalidParameter(f"duplicate keyframe id {kf.id}")
        self._frames[kf.id] = kf
        self._next_id = max(self._next_id, kf.id + 1)
        self.version += 1

    def remove(self, kid: int) -> None:
        if kid not in self._frames:
            raise InvalidParameter(f"no keyframe with id {kid}")
        del self._frames[kid]
        self.version += 1

    def positions(self) -> tuple[np.ndarray, list[int]]:
        ids = sorted(self._frames)
        if not ids:
            return np.zeros((0, 3)), ids
        return np.stack([self._frames[k].obs_pose.p for k in ids]), ids


def should_cull(last_pose: Pose, cur_pose: Pose, trans_thresh: float, rot_thresh: float) -> bool:
    """True when the motion since the last keyframe warrants a new one."""
    delta = relative(last_pose, cur_pose)
    return (
        float(np.linalg.norm(delta.p)) >= trans_thresh
        or rotation_angle(delta.q) >= rot_thresh
    )


def build_local_map(gmap: GlobalMap, guess: Pose, radius: float) -> LocalMap:
    """Union of keyframes observed within ``radius`` of the guess position,
    transformed into the map frame and re-downsampled at the leaf of the
    nearest contributing keyframe."""
    if radius <= 0.0:
        raise InvalidParameter(f"local map radius must be positive, got {radius}")
    positions, ids = gmap.positions()
    if not ids:
        raise NoNearbyKeyframes("map holds no keyframes")
    d = np.linalg.norm(positions - guess.p, axis=1)
    within = np.flatnonzero(d <= radius)
    if within.size == 0:
        raise NoNearbyKeyframes(f"no keyframe within {radius} m of guess")
    chosen = [ids[i] for i in within]
    leaf = gmap[ids[int(within[np.argmin(d[within])])]].leaf

    edge_parts = []
    surf_parts = []
    for kid in chosen:
        kf = gmap[kid]
        if len(kf.features.edges):
            edge_parts.append(kf.features.edges.transformed(kf.obs_pose).points)
        if len(kf.features.surfaces):
            surf_parts.append(kf.features.surfaces.transformed(kf.obs_pose).points)

    def assemble(parts: list[np.ndarray]) -> PointCloud:
        if not parts:
            return PointCloud(frame=FrameId.MAP)
        merged = PointCloud(np.vstack(parts), 0.0, FrameId.MAP)
        return voxel_downsample(merged, leaf)

    edge_cloud = assemble(edge_parts)
    surf_cloud = assemble(surf_parts)
    return LocalMap(
        edge_cloud,
        surf_cloud,
        SpatialIndex(edge_cloud.points) if len(edge_cloud) else None,
        SpatialIndex(surf_cloud.points) if len(surf_cloud) else None,
        chosen,
        guess.p.copy(),
        leaf,
    )


class LocalMapCache:
    """Rebuilds the local map only after the guess moves more than a quarter
    of the radius from the last build position, or the map changes."""

    def __init__(self, radius: float):
        self.radius = radius
        self._local: LocalMap | None = None
        self._version = -1

    def get(self, gmap: GlobalMap, guess: Pose) -> LocalMap:
        if (
            self._local is None
            or self._version != gmap.version
            or float(np.linalg.norm(guess.p - self._local.center)) > self.radius / 4.0
        ):
            self._local = build_local_map(gmap, guess, self.radius)
            self._version = gmap.version
        return self._local


def merge_temporary(
    gmap: GlobalMap,
    temp_keyframes: list[Keyframe],
    replace_radius: float,
    session_id: int,
) -> MergeReport:
    """Replace history keyframes near the temporary ones.

    Every existing keyframe observed within ``replace_radius`` of any
    temporary keyframe position is removed; the temporary keyframes are then
    inserted with fresh ids and this session's provenance.
    """
    if replace_radius <= 0.0:
        raise InvalidParameter(f"replace radius must be positive, got {replace_radius}")
    if session_id < 1:
        raise InvalidParameter("merge session ids start at 1")
    report = MergeReport()
    if not temp_keyframes:
        return report
    positions, ids = gmap.positions()
    if ids:
        temp_pos = np.stack([kf.obs_pose.p for kf in temp_keyframes])
        dists = np.linalg.norm(positions[:, None, :] - temp_pos[None, :, :], axis=2)
        doomed = np.flatnonzero(dists.min(axis=1) <= replace_radius)
        for i in doomed:
            gmap.remove(ids[i])
            report.removed_ids.append(ids[i])
    for kf in temp_keyframes:
        kid = gmap.allocate_id()
        gmap.insert(Keyframe(kid, kf.obs_pose, kf.features, kf.leaf, provenance=session_id))
        report.added_ids.append(kid)
    return report


def save_map(path: str | Path, gmap: GlobalMap) -> None:
    """Binary map: header {magic, version u32, count u64}; per keyframe
    {id u64, pose 7 x f64 scalar-last, leaf f32, provenance u32}, then the
    edge and surface clouds in the scan block sub-format."""
    chunks = [MAP_MAGIC, struct.pack("<IQ", MAP_VERSION, len(gmap))]
    for kf in gmap.keyframes():
        pose_vals = (*kf.obs_pose.p, *kf.obs_pose.q)
        chunks.append(struct.pack("<Q7dfI", kf.id, *pose_vals, kf.leaf, kf.provenance))
        chunks.append(scan_block_bytes(kf.features.edges))
        chunks.append(scan_block_bytes(kf.features.surfaces))
    Path(path).write_bytes(b"".join(chunks))


def load_map(path: str | Path) -> GlobalMap:
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise CorruptMap("map header truncated", len(buf))
    if buf[:4] != MAP_MAGIC:
        raise CorruptMap("bad map magic", 0)
    version, count = struct.unpack_from("<IQ", buf, 4)
    if version != MAP_VERSION:
        raise CorruptMap(f"unsupported map version {version}", 4)
    offset = 16
    gmap = GlobalMap()
    rec = struct.Struct("<Q7dfI")
    for _ in range(count):
        if len(buf) < offset + rec.size:
            raise CorruptMap("keyframe record truncated", len(buf))
        vals = rec.unpack_from(buf, offset)
        offset += rec.size
        kid = vals[0]
        pose = Pose(np.array(vals[1:4]), np.array(vals[4:8]))
        leaf, provenance = float(vals[8]), int(vals[9])
        try:
            edges, offset = parse_scan_block(buf, offset)
            surfaces, offset = parse_scan_block(buf, offset)
        except MalformedScan as exc:
            raise CorruptMap(f"embedded cloud: {exc}", offset) from exc
        frame = FeatureFrame(edges, surfaces, edges.timestamp)
        gmap.insert(Keyframe(int(kid), pose, frame, leaf, provenance))
    if offset != len(buf):
        raise CorruptMap(f"{len(buf) - offset} trailing bytes after last keyframe", offset)
    return gmap
