"""Edge / surface feature extraction from ring-structured scans, plus the
confined-space heuristic that picks the keyframe voxel size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import FrameId, PointCloud
from .errors import InvalidParameter, MalformedScan

# Structural constants of the smoothness neighborhood and sector quotas.
NEIGHBOR_SPAN = 5           # neighbors considered on each side within a ring
SECTOR_COUNT = 6
MAX_EDGES_PER_SECTOR = 2
MAX_SURFS_PER_SECTOR = 4
OCCLUSION_GAP = 0.3         # meters of neighbor range jump that disqualifies a point


@dataclass
class FeatureConfig:
    edge_threshold: float = 1.0
    surf_threshold: float = 0.1
    d_c: float = 5.0          # range below which a return counts as "close"
    r_c: float = 0.3          # close-return ratio above which a scan is confined
    open_leaf: float = 0.4
    confined_leaf: float = 0.2


@dataclass(eq=False)
class FeatureFrame:
    """Edge and surface features of one scan, in the sensor frame."""

    edges: PointCloud
    surfaces: PointCloud
    timestamp: float = 0.0
    confined: bool = False

    @classmethod
    def empty(cls, timestamp: float = 0.0) -> "FeatureFrame":
        return cls(PointCloud(timestamp=timestamp), PointCloud(timestamp=timestamp), timestamp)


def infer_ring_starts(points: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Recover ring start indices from per-ring constant beam elevation.

    Range noise perturbs returns along the beam, so elevation is exact per
    ring; a new ring starts wherever consecutive elevations differ.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if points.shape[0] == 0:
        return np.zeros(0, dtype=int)
    elev = np.arctan2(points[:, 2], np.hypot(points[:, 0], points[:, 1]))
    breaks = np.flatnonzero(np.abs(np.diff(elev)) > tol) + 1
    return np.concatenate([[0], breaks])


def _ring_smoothness(pts: np.ndarray) -> np.ndarray:
    """Smoothness c_i = |sum_j (p_j - p_i)| / (|N| * |p_i|) over the
    NEIGHBOR_SPAN-each-side window; NaN outside the interior."""
    n = pts.shape[0]
    c = np.full(n, np.nan)
    w = 2 * NEIGHBOR_SPAN + 1
    if n < w:
        return c
    csum = np.cumsum(pts, axis=0)
    window = csum[w - 1 :].copy()
    window[1:] -= csum[: n - w]
    # window[k] = sum of pts[k .. k+w-1]; interior index i = k + NEIGHBOR_SPAN
    interior = slice(NEIGHBOR_SPAN, n - NEIGHBOR_SPAN)
    diff = window - w * pts[interior]
    ranges = np.linalg.norm(pts[interior], axis=1)
    c[interior] = np.linalg.norm(diff, axis=1) / (2 * NEIGHBOR_SPAN * ranges)
    return c


def _check_azimuth_order(pts: np.ndarray, ring_index: int) -> None:
    az = np.arctan2(pts[:, 1], pts[:, 0])
    d = np.diff(az)
    regressions = (d < -1e-9) & (d > -np.pi)
    wraps = d <= -np.pi
    if np.any(regressions) or np.count_nonzero(wraps) > 1:
        raise MalformedScan(f"ring {ring_index} is not ordered by azimuth")


def extract_features(
    scan: PointCloud, ring_starts: np.ndarray, cfg: FeatureConfig | None = None
) -> FeatureFrame:
    """Classify scan points into edge and surface features.

    Points need a full smoothness neighborhood inside their ring; rings
    shorter than the window contribute nothing. Points adjacent to a range
    discontinuity (occlusion boundaries, near-parallel beams) are excluded
    before classification.
    """
    cfg = cfg or FeatureConfig()
    pts = scan.points
    if pts.shape[0] == 0:
        return FeatureFrame.empty(scan.timestamp)

    starts = np.asarray(ring_starts, dtype=int)
    ends = np.concatenate([starts[1:], [pts.shape[0]]])
    edge_idx: list[np.ndarray] = []
    surf_idx: list[np.ndarray] = []

    for ring_no, (s, e) in enumerate(zip(starts, ends)):
        ring = pts[s:e]
        n = ring.shape[0]
        if n == 0:
            continue
        _check_azimuth_order(ring, ring_no)
        if n < 2 * NEIGHBOR_SPAN + 1:
            continue
        c = _ring_smoothness(ring)
        ranges = np.linalg.norm(ring, axis=1)
        gap = np.abs(np.diff(ranges))
        occluded = np.zeros(n, dtype=bool)
        occluded[:-1] |= gap > OCCLUSION_GAP
        occluded[1:] |= gap > OCCLUSION_GAP
        usable = np.isfinite(c) & ~occluded

        sector = (np.arange(n) * SECTOR_COUNT) // n
        for sec in range(SECTOR_COUNT):
            in_sec = np.flatnonzero((sector == sec) & usable)
            if in_sec.size == 0:
                continue
            cs = c[in_sec]
            edges = in_sec[cs > cfg.edge_threshold]
            if edges.size:
                order = np.lexsort((edges, -c[edges]))
                edge_idx.append(s + edges[order[:MAX_EDGES_PER_SECTOR]])
            surfs = in_sec[cs < cfg.surf_threshold]
            if surfs.size:
                order = np.lexsort((surfs, c[surfs]))
                surf_idx.append(s + surfs[order[:MAX_SURFS_PER_SECTOR]])

    def gather(chunks: list[np.ndarray]) -> PointCloud:
        if not chunks:
            return PointCloud(timestamp=scan.timestamp, frame=scan.frame)
        idx = np.sort(np.concatenate(chunks))
        return PointCloud(pts[idx], scan.timestamp, scan.frame)

    ratio = confined_ratio(scan, cfg.d_c)
    return FeatureFrame(gather(edge_idx), gather(surf_idx), scan.timestamp, ratio > cfg.r_c)


def confined_ratio(scan: PointCloud, d_c: float) -> float:
    """Fraction of returns closer than ``d_c``; 0 for an empty scan."""
    if d_c <= 0.0:
        raise InvalidParameter(f"d_c must be positive, got {d_c}")
    if len(scan) == 0:
        return 0.0
    ranges = np.linalg.norm(scan.points, axis=1)
    return float(np.count_nonzero(ranges < d_c)) / len(scan)


def choose_voxel_size(ratio: float, r_c: float, open_leaf: float, confined_leaf: float) -> float:
    """Confined environments get the finer leaf."""
    if confined_leaf >= open_leaf:
        raise InvalidParameter(
            f"confined leaf {confined_leaf} must be smaller than open leaf {open_leaf}"
        )
    if not 0.0 <= ratio <= 1.0:
        raise InvalidParameter(f"ratio must lie in [0, 1], got {ratio}")
    return confined_leaf if ratio > r_c else open_leaf
