"""Scan-to-map registration: edge and surface correspondences against a
local map, point-to-line / point-to-plane residuals, and a damped
Gauss-Newton solver over the 6-dof pose tangent.

The solver linearizes around a left perturbation, ``pose' = exp(d) o pose``,
so a transformed point moves as ``w + dt + dw x w`` and each residual row has
Jacobian ``[grad, w x grad]`` where ``grad`` is the residual gradient with
respect to the world point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateCorrespondence,
    InsufficientCorrespondences,
    InvalidParameter,
    NumericalFailure,
)
from .features import FeatureFrame
from .keymap import LocalMap
from .se3 import Pose, compose, se3_exp

_DEGENERATE = 1e-9
_ZERO_RESIDUAL = 1e-12


@dataclass
class MatchOptions:
    max_iters: int = 10
    max_corr_dist: float = 1.0
    min_correspondences: int = 50
    d_t: float = 1.0              # inlier gate on final residuals
    lambda_init: float = 1e-4
    trans_eps: float = 1e-4       # converged when the step drops below these
    rot_eps: float = 1e-4


@dataclass(eq=False)
class Correspondence:
    kind: str                     # "edge" or "surf"
    source: np.ndarray            # feature point in the sensor frame
    targets: np.ndarray           # 2 (line) or 3 (plane) map points
    distance: float               # residual at the association pose


@dataclass(eq=False)
class MatchResult:
    pose: Pose
    inlier_ratio: float
    assoc_count: int
    iterations: int
    converged: bool
    residuals: np.ndarray
    cost_trace: list[tuple[float, float]] = field(default_factory=list)


def point_to_line(p, a, b) -> float:
    """Distance from ``p`` to the line through ``a`` and ``b``."""
    p, a, b = (np.asarray(v, dtype=float) for v in (p, a, b))
    ab = np.linalg.norm(a - b)
    if ab <= _DEGENERATE:
        raise DegenerateCorrespondence("line support points coincide")
    return float(np.linalg.norm(np.cross(p - a, p - b)) / ab)


def point_to_plane(p, a, b, c) -> float:
    """Distance from ``p`` to the plane spanned by ``a``, ``b``, ``c``."""
    p, a, b, c = (np.asarray(v, dtype=float) for v in (p, a, b, c))
    n = np.cross(b - a, c - a)
    nn = np.linalg.norm(n)
    if nn <= _DEGENERATE:
        raise DegenerateCorrespondence("plane support points are collinear")
    return float(abs((p - a) @ n) / nn)


def inlier_ratio(residuals: np.ndarray, d_t: float) -> float:
    """Fraction of residuals strictly below ``d_t``; 0 for an empty set."""
    if d_t <= 0.0:
        raise InvalidParameter(f"d_t must be positive, got {d_t}")
    residuals = np.asarray(residuals, dtype=float)
    if residuals.size == 0:
        return 0.0
    return float(np.count_nonzero(residuals < d_t)) / residuals.size


def predict_pose(drift: Pose, odom_pose: Pose) -> Pose:
    """Map-frame pose guess from the current odometry-to-map drift."""
    return compose(drift, odom_pose)


@dataclass(eq=False)
class _Assoc:
    """Batislandched correspondence arrays; sources are sensor-frame points."""

    e_src: np.ndarray
    e_a: np.ndarray
    e_b: np.ndarray
    s_src: np.ndarray
    s_a: np.ndarray
    s_b: np.ndarray
    s_c: np.ndarray

    @property
    def count(self) -> int:
        return self.e_src.shape[0] + self.s_src.shape[0]


def _associate_arrays(frame: FeatureFrame, pose: Pose, local: LocalMap, max_corr_dist: float) -> _Assoc:
    rot = pose.rotation_matrix()
    empty = np.zeros((0, 3))
    e_src = e_a = e_b = empty
    if len(frame.edges) and local.edge_index is not None and len(local.edge_index) >= 2:
        src = frame.edges.points
        world = src @ rot.T + pose.p
        dists, idx = local.edge_index.knn_batch(world, 2)
        a = local.edge_index.points[idx[:, 0]]
        b = local.edge_index.points[idx[:, 1]]
        ok = (dists[:, 0] <= max_corr_dist) & (np.linalg.norm(a - b, axis=1) > _DEGENERATE)
        e_src, e_a, e_b = src[ok], a[ok], b[ok]
    s_src = s_a = s_b = s_c = empty
    if len(frame.surfaces) and local.surf_index is not None and len(local.surf_index) >= 3:
        src = frame.surfaces.points
        world = src @ rot.T + pose.p
        dists, idx = local.surf_index.knn_batch(world, 3)
        a = local.surf_index.points[idx[:, 0]]
        b = local.surf_index.points[idx[:, 1]]
        c = local.surf_index.points[idx[:, 2]]
        nrm = np.cross(b - a, c - a)
        ok = (dists[:, 0] <= max_corr_dist) & (np.linalg.norm(nrm, axis=1) > _DEGENERATE)
        s_src, s_a, s_b, s_c = src[ok], a[ok], b[ok], c[ok]
    return _Assoc(e_src, e_a, e_b, s_src, s_a, s_b, s_c)


def _edge_terms(world: np.ndarray, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Point-to-line distances and their gradients w.r.t. the world point."""
    axis = b - a
    axis = axis / np.linalg.norm(axis, axis=1, keepdims=True)
    u = world - a
    proj = u - (np.sum(u * axis, axis=1, keepdims=True)) * axis
    dist = np.linalg.norm(proj, axis=1)
    safe = np.where(dist > _ZERO_RESIDUAL, dist, 1.0)[:, None]
    grad = np.where(dist[:, None] > _ZERO_RESIDUAL, proj / safe, 0.0)
    return dist, grad


def _plane_terms(
    world: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Point-to-plane distances and their gradients w.r.t. the world point."""
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    signed = np.sum((world - a) * n, axis=1)
    dist = np.abs(signed)
    sign = np.where(dist > _ZERO_RESIDUAL, np.sign(signed), 0.0)
    return dist, sign[:, None] * n


def _residuals(assoc: _Assoc, pose: Pose) -> np.ndarray:
    rot = pose.rotation_matrix()
    parts = []
    if assoc.e_src.shape[0]:
        world = assoc.e_src @ rot.T + pose.p
        parts.append(_edge_terms(world, assoc.e_a, assoc.e_b)[0])
    if assoc.s_src.shape[0]:
        world = assoc.s_src @ rot.T + pose.p
        parts.append(_plane_terms(world, assoc.s_a, assoc.s_b, assoc.s_c)[0])
    return np.concatenate(parts) if parts else np.zeros(0)


def _residuals_jacobian(assoc: _Assoc, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    rot = pose.rotation_matrix()
    res, jac = [], []
    if assoc.e_src.shape[0]:
        world = assoc.e_src @ rot.T + pose.p
        dist, grad = _edge_terms(world, assoc.e_a, assoc.e_b)
        res.append(dist)
        jac.append(np.hstack([grad, np.cross(world, grad)]))
    if assoc.s_src.shape[0]:
        world = assoc.s_src @ rot.T + pose.p
        dist, grad = _plane_terms(world, assoc.s_a, assoc.s_b, assoc.s_c)
        res.append(dist)
        jac.append(np.hstack([grad, np.cross(world, grad)]))
    if not res:
        return np.zeros(0), np.zeros((0, 6))
    return np.concatenate(res), np.vstack(jac)


def edge_residual_jacobian(pose: Pose, p, a, b) -> tuple[float, np.ndarray]:
    """Point-to-line residual and its 6-vector Jacobian in the left-perturbation
    tangent; ``p`` is a sensor-frame point, ``a``/``b`` map points."""
    assoc = _Assoc(
        np.asarray(p, dtype=float).reshape(1, 3),
        np.asarray(a, dtype=float).reshape(1, 3),
        np.asarray(b, dtype=float).reshape(1, 3),
        np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)),
    )
    r, j = _residuals_jacobian(assoc, pose)
    return float(r[0]), j[0]


def plane_residual_jacobian(pose: Pose, p, a, b, c) -> tuple[float, np.ndarray]:
    """Point-to-plane residual and Jacobian, conventions as for edges."""
    assoc = _Assoc(
        np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)),
        np.asarray(p, dtype=float).reshape(1, 3),
        np.asarray(a, dtype=float).reshape(1, 3),
        np.asarray(b, dtype=float).reshape(1, 3),
        np.asarray(c, dtype=float).reshape(1, 3),
    )
    r, j = _residuals_jacobian(assoc, pose)
    return float(r[0]), j[0]


def associate(
    frame: FeatureFrame, guess: Pose, local: LocalMap, max_corr_dist: float
) -> list[Correspondence]:
    """Valid correspondences at ``guess``; gated by nearest-neighbor distance
    and by degenerate support geometry."""
    if max_corr_dist <= 0.0:
        raise InvalidParameter(f"max_corr_dist must be positive, got {max_corr_dist}")
    assoc = _associate_arrays(frame, guess, local, max_corr_dist)
    rot = guess.rotation_matrix()
    out: list[Correspondence] = []
    if assoc.e_src.shape[0]:
        world = assoc.e_src @ rot.T + guess.p
        dist, _ = _edge_terms(world, assoc.e_a, assoc.e_b)
        for i in range(assoc.e_src.shape[0]):
            out.append(
                Correspondence("edge", assoc.e_src[i], np.stack([assoc.e_a[i], assoc.e_b[i]]), float(dist[i]))
            )
    if assoc.s_src.shape[0]:
        world = assoc.s_src @ rot.T + guess.p
        dist, _ = _plane_terms(world, assoc.s_a, assoc.s_b, assoc.s_c)
        for i in range(assoc.s_src.shape[0]):
            out.append(
                Correspondence(
                    "surf",
                    assoc.s_src[i],
                    np.stack([assoc.s_a[i], assoc.s_b[i], assoc.s_c[i]]),
                    float(dist[i]),
                )
            )
    return out


def optimize(frame: FeatureFrame, guess: Pose, local: LocalMap, opts: MatchOptions | None = None) -> MatchResult:
    """Damped Gauss-Newton with re-association at every accepted iterate.

    Each outer iteration rebuilds correspondences at the current pose, then
    inner attempts adjust the damping until a step lowers the cost over that
    fixed correspondence set.
    """
    opts = opts or MatchOptions()
    pose = guess.copy()
    lam = opts.lambda_init
    cost_trace: list[tuple[float, float]] = []
    converged = False
    iterations = 0

    for _ in range(opts.max_iters):
        assoc = _associate_arrays(frame, pose, local, opts.max_corr_dist)
        if assoc.count < opts.min_correspondences:
            raise InsufficientCorrespondences(
                f"{assoc.count} valid correspondences, need {opts.min_correspondences}"
            )
        r, j = _residuals_jacobian(assoc, pose)
        cost = float(r @ r)
        h = j.T @ j
        g = j.T @ r
        accepted = False
        step = np.zeros(6)
        for _attempt in range(8):
            try:
                step = np.linalg.solve(h + lam * np.eye(6), -g)
            except np.linalg.LinAlgError as exc:
                raise NumericalFailure("normal equations solve failed") from exc
            if not np.all(np.isfinite(step)):
                raise NumericalFailure("non-finite Gauss-Newton step")
            candidate = compose(se3_exp(step), pose)
            new_cost = float(np.sum(_residuals(assoc, candidate) ** 2))
            if new_cost < cost:
                pose = candidate
                lam = max(lam / 10.0, 1e-12)
                cost_trace.append((cost, new_cost))
                accepted = True
                break
            lam *= 10.0
        iterations += 1
        if not accepted:
            break
        if (
            float(np.linalg.norm(step[:3])) < opts.trans_eps
            and float(np.linalg.norm(step[3:])) < opts.rot_eps
        ):
            converged = True
            break

    final_assoc = _associate_arrays(frame, pose, local, opts.max_corr_dist)
    if final_assoc.count < opts.min_correspondences:
        raise InsufficientCorrespondences(
            f"{final_assoc.count} valid correspondences at the final pose, "
            f"need {opts.min_correspondences}"
        )
    residuals = _residuals(final_assoc, pose)
    return MatchResult(
        pose=pose,
        inlier_ratio=inlier_ratio(residuals, opts.d_t),
        assoc_count=final_assoc.count,
        iterations=iterations,
        converged=converged,
        residuals=residuals,
        cost_trace=cost_trace,
    )
