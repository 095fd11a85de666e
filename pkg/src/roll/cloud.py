"""Point cloud container, voxel downsampling, nearest-neighbor index, and
the binary scan / CSV trajectory file formats.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyIndex, InvalidParameter, MalformedScan
from .se3 import Pose

SCAN_MAGIC = b"RLSC"
SCAN_VERSION = 1

# Floats in CSV output carry enough digits that evaluation error from
# re-reading them is negligible, while staying byte-stable across runs.
_CSV_FMT = "%.12g"


class FrameId(enum.Enum):
    LIDAR = "lidar"
    ODOM = "odom"
    MAP = "map"


@dataclass(eq=False)
class PointCloud:
    """N x 3 float64 coordinates with a timestamp and a frame tag."""

    points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    timestamp: float = 0.0
    frame: FrameId = FrameId.LIDAR

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise InvalidParameter("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return self.points.shape[0]

    def transformed(self, pose: Pose, frame: FrameId | None = None) -> "PointCloud":
        pts = self.points @ pose.rotation_matrix().T + pose.p
        return PointCloud(pts, self.timestamp, frame if frame is not None else self.frame)


def voxel_downsample(cloud: PointCloud, leaf: float) -> PointCloud:
    """Centroid-per-voxel filter with ``floor(coord / leaf)`` cell keys.

    Output points are ordered by lexicographically sorted voxel key, so the
    result is deterministic regardless of input ordering.
    """
    if leaf <= 0.0:
        raise InvalidParameter(f"voxel leaf must be positive, got {leaf}")
    if len(cloud) == 0:
        return PointCloud(np.zeros((0, 3)), cloud.timestamp, cloud.frame)
    keys = np.floor(cloud.points / leaf).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    sums = np.zeros((uniq.shape[0], 3))
    np.add.at(sums, inverse, cloud.points)
    counts = np.bincount(inverse, minlength=uniq.shape[0]).astype(float)
    centroids = sums / counts[:, None]
    return PointCloud(centroids, cloud.timestamp, cloud.frame)


class SpatialIndex:
    """Exact nearest-neighbor index over a fixed point set.

    Ties are broken by insertion order; radius queries use ``<= r`` and
    return points in insertion order, matching a brute-force scan.
    """

    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if points.shape[0] == 0:
            raise EmptyIndex("cannot build a spatial index over zero points")
        self.points = points
        self._tree = cKDTree(points)

    def __len__(self) -> int:
        return self.points.shape[0]

    def knn(self, query, k: int) -> list[tuple[np.ndarray, float]]:
        """The ``k`` nearest points, ascending by distance."""
        if k <= 0:
            raise InvalidParameter(f"k must be positive, got {k}")
        k = min(k, len(self))
        dists, idx = self._tree.query(np.asarray(query, dtype=float), k=k)
        dists = np.atleast_1d(dists)
        idx = np.atleast_1d(idx)
        # Stable order for exactly tied distances: lower insertion index first.
        order = np.lexsort((idx, dists))
        return [(self.points[idx[i]], float(dists[i])) for i in order]

    def knn_batch(self, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized k-NN for many queries: (distances, indices), each (n, k)."""
        if k <= 0:
            raise InvalidParameter(f"k must be positive, got {k}")
        k = min(k, len(self))
        dists, idx = self._tree.query(np.asarray(queries, dtype=float), k=k)
        if k == 1:
            dists = dists[:, None]
            idx = idx[:, None]
        return dists, idx

    def radius_search(self, query, radius: float) -> list[tuple[np.ndarray, float]]:
        """All points with distance ``<= radius``, in insertion order."""
        if radius < 0.0:
            raise InvalidParameter(f"radius must be non-negative, got {radius}")
        q = np.asarray(query, dtype=float)
        idx = sorted(self._tree.query_ball_point(q, radius))
        return [(self.points[i], float(np.linalg.norm(self.points[i] - q))) for i in idx]


def write_scan(path: str | Path, cloud: PointCloud) -> None:
    """Binary scan file: magic, version u32, timestamp f64, count u32,
    then count x 3 float32 little-endian coordinates."""
    pts = cloud.points.astype("<f4")
    with open(path, "wb") as f:
        f.write(SCAN_MAGIC)
        f.write(struct.pack("<Id", SCAN_VERSION, cloud.timestamp))
        f.write(struct.pack("<I", pts.shape[0]))
        f.write(pts.tobytes())


def scan_block_bytes(cloud: PointCloud) -> bytes:
    pts = cloud.points.astype("<f4")
    return (
        SCAN_MAGIC
        + struct.pack("<Id", SCAN_VERSION, cloud.timestamp)
        + struct.pack("<I", pts.shape[0])
        + pts.tobytes()
    )


def parse_scan_block(buf: bytes, offset: int, frame: FrameId = FrameId.LIDAR) -> tuple[PointCloud, int]:
    """Parse one scan block from ``buf`` starting at ``offset``.

    Returns the cloud and the offset one past the block. Raises
    MalformedScan on bad magic/version or truncation.
    """
    if len(buf) < offset + 16:
        raise MalformedScan(f"scan block truncated at byte {len(buf)} (offset {offset})")
    if buf[offset : offset + 4] != SCAN_MAGIC:
        raise MalformedScan(f"bad scan magic at byte {offset}")
    version, timestamp = struct.unpack_from("<Id", buf, offset + 4)
    if version != SCAN_VERSION:
        raise MalformedScan(f"unsupported scan version {version} at byte {offset + 4}")
    (count,) = struct.unpack_from("<I", buf, offset + 16)
    start = offset + 20
    end = start + count * 12
    if len(buf) < end:
        raise MalformedScan(f"scan block truncated at byte {len(buf)} (expected {end})")
    pts = np.frombuffer(buf[start:end], dtype="<f4").reshape(count, 3).astype(float)
    return PointCloud(pts, timestamp, frame), end


def read_scan(path: str | Path) -> PointCloud:
    buf = Path(path).read_bytes()
    cloud, end = parse_scan_block(buf, 0)
    if end != len(buf):
        raise MalformedScan(f"{len(buf) - end} trailing bytes after scan payload")
    return cloud


def write_trajectory(path: str | Path, samples: list[tuple[float, Pose]], sources: list[str] | None = None) -> None:
    """CSV with header ``t,px,py,pz,qx,qy,qz,qw`` (plus ``source`` when given)."""
    header = "t,px,py,pz,qx,qy,qz,qw" + (",source" if sources is not None else "")
    lines = [header]
    for i, (t, pose) in enumerate(samples):
        vals = [t, *pose.p, *pose.q]
        row = ",".join(_CSV_FMT % v for v in vals)
        if sources is not None:
            row += "," + sources[i]
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path: str | Path) -> list[tuple[float, Pose]]:
    samples: list[tuple[float, Pose]] = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("t,"):
            continue
        parts = line.split(",")
        vals = [float(x) for x in parts[:8]]
        samples.append((vals[0], Pose(vals[1:4], vals[4:8])))
    return samples
