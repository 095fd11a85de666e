"""Rigid-body poses as position plus unit quaternion, with the tangent-space
operators the estimators are built on.

Conventions used everywhere in this package:

* quaternions are stored scalar-last ``[x, y, z, w]`` (Hamilton product);
* tangent vectors are 6-vectors ``[rho, phi]`` with the 3 translational
  components first and the 3 rotational components last;
* ``compose(a, b)`` applies ``b`` in the frame of ``a``, i.e. the usual
  matrix product ``T_a @ T_b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRotation, InvalidParameter

# Below this rotation angle (radians) closed-form coefficients switch to
# their Taylor expansions.
SMALL_ANGLE = 1e-6

# se3_log refuses rotations within this margin of the 180 degree singularity.
LOG_ANGLE_MARGIN = 1e-6


@dataclass(eq=False)
class Pose:
    """Rigid transform ``{p, q}``: rotate by ``q`` then translate by ``p``."""

    p: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))

    def __post_init__(self) -> None:
        self.p = np.asarray(self.p, dtype=float).reshape(3).copy()
        self.q = np.asarray(self.q, dtype=float).reshape(4).copy()
        if not (np.all(np.isfinite(self.p)) and np.all(np.isfinite(self.q))):
            raise InvalidParameter("pose components must be finite")
        n = float(np.linalg.norm(self.q))
        if n < 1e-12:
            raise InvalidParameter("quaternion norm too small to normalize")
        self.q /= n

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_rotvec(cls, rotvec, p=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(np.asarray(p, dtype=float), quat_from_rotvec(np.asarray(rotvec, dtype=float)))

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def copy(self) -> "Pose":
        return Pose(self.p.copy(), self.q.copy())

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        p = ", ".join(f"{v:.4f}" for v in self.p)
        q = ", ".join(f"{v:.4f}" for v in self.q)
        return f"Pose(p=[{p}], q=[{q}])"


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix: ``skew(a) @ b == cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    av, aw = a[:3], a[3]
    bv, bw = b[:3], b[3]
    v = aw * bv + bw * av + np.cross(av, bv)
    w = aw * bw - float(av @ bv)
    return np.array([v[0], v[1], v[2], w])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array(
        [
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ]
    )


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vector ``v`` by unit quaternion ``q``."""
    qv, qw = q[:3], q[3]
    t = 2.0 * np.cross(qv, v)
    return v + qw * t + np.cross(qv, t)


def quat_from_rotvec(rv: np.ndarray) -> np.ndarray:
    angle = float(np.linalg.norm(rv))
    if angle < SMALL_ANGLE:
        # sin(a/2)/a ~ 1/2 - a^2/48
        s = 0.5 - angle * angle / 48.0
        w = 1.0 - angle * angle / 8.0
    else:
        s = np.sin(0.5 * angle) / angle
        w = np.cos(0.5 * angle)
    v = rv * s
    return np.array([v[0], v[1], v[2], w])


def rotvec_from_quat(q: np.ndarray) -> np.ndarray:
    """Rotation vector with angle in [0, pi]; raises near the 180 degree cut."""
    if q[3] < 0.0:
        q = -q
    s = float(np.linalg.norm(q[:3]))
    angle = 2.0 * np.arctan2(s, q[3])
    if angle >= np.pi - LOG_ANGLE_MARGIN:
        raise DegenerateRotation(f"rotation angle {angle:.9f} too close to pi")
    if s < SMALL_ANGLE:
        # angle/sin(angle/2) ~ 2 + angle^2/12
        return q[:3] * (2.0 + angle * angle / 12.0)
    return q[:3] * (angle / s)


def rotation_angle(q: np.ndarray) -> float:
    """Geodesic rotation angle of ``q`` in [0, pi]."""
    return 2.0 * float(np.arctan2(np.linalg.norm(q[:3]), abs(q[3])))


def compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.p + quat_rotate(a.q, b.p), quat_multiply(a.q, b.q))


def inverse(a: Pose) -> Pose:
    qc = quat_conjugate(a.q)
    return Pose(-quat_rotate(qc, a.p), qc)


def relative(a: Pose, b: Pose) -> Pose:
    """``inverse(a) o b``: pose of ``b`` expressed in the frame of ``a``."""
    return compose(inverse(a), b)


def _v_matrix(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    k = skew(phi)
    if theta < SMALL_ANGLE:
        c1 = 0.5 - theta * theta / 24.0
        c2 = 1.0 / 6.0 - theta * theta / 120.0
    else:
        c1 = (1.0 - np.cos(theta)) / (theta * theta)
        c2 = (theta - np.sin(theta)) / (theta ** 3)
    return np.eye(3) + c1 * k + c2 * (k @ k)


def _v_matrix_inv(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    k = skew(phi)
    if theta < SMALL_ANGLE:
        c = 1.0 / 12.0 + theta * theta / 720.0
    else:
        c = 1.0 / (theta * theta) - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * k + c * (k @ k)


def se3_exp(xi: np.ndarray) -> Pose:
    """Exponential map of a ``[rho, phi]`` tangent vector."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    return Pose(_v_matrix(phi) @ rho, quat_from_rotvec(phi))


def se3_log(t: Pose) -> np.ndarray:
    """Inverse of :func:`se3_exp`; rotation angle must stay below pi."""
    phi = rotvec_from_quat(t.q)
    rho = _v_matrix_inv(phi) @ t.p
    return np.concatenate([rho, phi])


def ominus(a: Pose, b: Pose) -> np.ndarray:
    """Element-wise pose difference used by the sliding-window estimator.

    Translation part is a plain subtraction; rotation part subtracts the
    imaginary quaternion components, flipping the sign of ``b.q`` first when
    the two quaternions sit on opposite sides of the double cover.
    """
    qb = b.q if float(a.q @ b.q) >= 0.0 else -b.q
    return np.concatenate([a.p - b.p, a.q[:3] - qb[:3]])


def adjoint(t: Pose) -> np.ndarray:
    """6x6 adjoint of a pose acting on ``[rho, phi]`` tangents."""
    r = quat_to_matrix(t.q)
    ad = np.zeros((6, 6))
    ad[:3, :3] = r
    ad[:3, 3:] = skew(t.p) @ r
    ad[3:, 3:] = r
    return ad


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    k = skew(phi)
    if theta < SMALL_ANGLE:
        c = 1.0 / 12.0 + theta * theta / 720.0
    else:
        c = 1.0 / (theta * theta) - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * k + c * (k @ k)


def _se3_q_matrix(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Translation-rotation coupling block of the se(3) left Jacobian."""
    theta = float(np.linalg.norm(phi))
    rx = skew(rho)
    px = skew(phi)
    if theta < 1e-4:
        t2 = theta * theta
        c2 = 1.0 / 6.0 - t2 / 120.0          # (t - sin t) / t^3
        c3 = -1.0 / 24.0 + t2 / 720.0        # (1 - t^2/2 - cos t) / t^4
        c4 = -1.0 / 120.0 + t2 / 2520.0      # (t - sin t - t^3/6) / t^5
    else:
        t3, t4, t5 = theta ** 3, theta ** 4, theta ** 5
        c2 = (theta - np.sin(theta)) / t3
        c3 = (1.0 - 0.5 * theta * theta - np.cos(theta)) / t4
        c4 = (theta - np.sin(theta) - theta ** 3 / 6.0) / t5
    m1 = px @ rx + rx @ px + px @ rx @ px
    m2 = px @ px @ rx + rx @ px @ px - 3.0 * (px @ rx @ px)
    m3 = px @ rx @ px @ px + px @ px @ rx @ px
    return 0.5 * rx + c2 * m1 - c3 * m2 - 0.5 * (c3 - 3.0 * c4) * m3


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float).reshape(6)
    rho, phi = xi[:3], xi[3:]
    a = so3_left_jacobian_inv(phi)
    q = _se3_q_matrix(rho, phi)
    j = np.zeros((6, 6))
    j[:3, :3] = a
    j[:3, 3:] = -a @ q @ a
    j[3:, 3:] = a
    return j


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float).reshape(6))
