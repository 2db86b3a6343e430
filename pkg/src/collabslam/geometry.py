"""Rigid transforms, rotation helpers and the pinhole camera model.

Conventions used throughout the package:

* quaternions are stored ``(w, x, y, z)`` and kept unit norm;
* ``Se3`` maps points from its source frame into its target frame,
  ``p_target = R @ p_source + t``;
* tangent vectors are ordered ``(rho, phi)``: translation part first;
* the world frame is gravity aligned with +Z up, and yaw is the first
  angle of a Z-Y-X Euler decomposition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# ---------------------------------------------------------------------------
# quaternion / SO(3) helpers
# ---------------------------------------------------------------------------


def quat_normalize(q):
    q = np.array(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    # idempotent: an already-unit quaternion keeps its exact bits
    if abs(n - 1.0) > 4e-16:
        q = q / n
    # canonical hemisphere keeps the textual form stable
    if q[0] < 0.0:
        q = -q
    return q


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R):
    """Shepperd's method; picks the largest pivot for stability."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(phi):
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * K @ K


def so3_log(R):
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    theta = math.acos(cos_theta)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * w
    if math.pi - theta < 1e-5:
        # near pi: recover the axis from the symmetric part
        B = 0.5 * (R + np.eye(3))
        axis = np.sqrt(np.clip(np.diag(B), 0.0, None))
        k = int(np.argmax(axis))
        axis[k] = math.sqrt(max(B[k, k], 0.0))
        for i in range(3):
            if i != k:
                axis[i] = B[k, i] / axis[k]
        axis /= np.linalg.norm(axis)
        if np.dot(axis, w) < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * math.sin(theta)) * w


def so3_left_jacobian(phi):
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    t2 = theta * theta
    return (
        np.eye(3)
        + (1.0 - math.cos(theta)) / t2 * K
        + (theta - math.sin(theta)) / (t2 * theta) * K @ K
    )


def so3_left_jacobian_inv(phi):
    theta = float(np.linalg.norm(phi))
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    half = 0.5 * theta
    c = (1.0 - half * math.cos(half) / math.sin(half)) / (theta * theta)
    return np.eye(3) - 0.5 * K + c * K @ K


def _se3_q(rho, phi):
    """Off-diagonal block of the SE(3) left Jacobian (Barfoot's Q)."""
    theta = float(np.linalg.norm(phi))
    P = skew(phi)
    Rh = skew(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    t2 = theta * theta
    if theta < 1e-3:
        a = 1.0 / 6.0 - t2 / 120.0
        b = 1.0 / 24.0 - t2 / 720.0
        d = 1.0 / 120.0
    else:
        s, c = math.sin(theta), math.cos(theta)
        a = (theta - s) / (t2 * theta)
        b = (t2 + 2.0 * c - 2.0) / (2.0 * t2 * t2)
        d = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t2 * t2 * theta)
    return (
        0.5 * Rh
        + a * (PR + RP + PRP)
        + b * (P @ PR + RP @ P - 3.0 * PRP)
        + d * (PRP @ P + P @ PRP)
    )


def se3_left_jacobian_inv(xi):
    """Inverse left Jacobian of SE(3) for ``xi = (rho, phi)``."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    Jinv = so3_left_jacobian_inv(phi)
    Q = _se3_q(rho, phi)
    out = np.zeros((6, 6))
    out[:3, :3] = Jinv
    out[3:, 3:] = Jinv
    out[:3, 3:] = -Jinv @ Q @ Jinv
    return out


def se3_right_jacobian_inv(xi):
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


# batched variants: leading axis indexes independent elements ----------------


def skew_batch(v):
    v = np.asarray(v, dtype=float)
    K = np.zeros(v.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -v[..., 2], v[..., 1]
    K[..., 1, 0], K[..., 1, 2] = v[..., 2], -v[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -v[..., 1], v[..., 0]
    return K


def so3_exp_batch(phi):
    phi = np.asarray(phi, dtype=float).reshape(-1, 3)
    th = np.linalg.norm(phi, axis=1)
    small = th < 1e-8
    ts = np.where(small, 1.0, th)
    a = np.where(small, 1.0, np.sin(ts) / ts)
    b = np.where(small, 0.5, (1.0 - np.cos(ts)) / (ts * ts))
    K = skew_batch(phi)
    return np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)


def so3_log_batch(R):
    R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
    c = np.clip((np.trace(R, axis1=1, axis2=2) - 1.0) * 0.5, -1.0, 1.0)
    th = np.arccos(c)
    w = np.stack([R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]], axis=1)
    small = th < 1e-8
    ts = np.where(small, 1.0, th)
    f = np.where(small, 0.5, ts / (2.0 * np.sin(np.where(small, 1.0, ts))))
    out = f[:, None] * w
    for i in np.nonzero(math.pi - th < 1e-5)[0]:
        out[i] = so3_log(R[i])
    return out


def so3_left_jacobian_inv_batch(phi):
    phi = np.asarray(phi, dtype=float).reshape(-1, 3)
    th = np.linalg.norm(phi, axis=1)
    small = th < 1e-6
    ts = np.where(small, 1.0, th)
    half = 0.5 * ts
    c = np.where(small, 1.0 / 12.0, (1.0 - half * np.cos(half) / np.sin(half)) / (ts * ts))
    K = skew_batch(phi)
    return np.eye(3) - 0.5 * K + c[:, None, None] * (K @ K)


def _se3_q_batch(rho, phi):
    th = np.linalg.norm(phi, axis=1)
    P = skew_batch(phi)
    Rh = skew_batch(rho)
    PR = P @ Rh
    RP = Rh @ P
    PRP = PR @ P
    t2 = th * th
    small = th < 1e-3
    ts = np.where(small, 1.0, th)
    t2s = ts * ts
    s, c = np.sin(ts), np.cos(ts)
    a = np.where(small, 1.0 / 6.0 - t2 / 120.0, (ts - s) / (t2s * ts))
    b = np.where(small, 1.0 / 24.0 - t2 / 720.0, (t2s + 2.0 * c - 2.0) / (2.0 * t2s * t2s))
    d = np.where(small, 1.0 / 120.0, (2.0 * ts - 3.0 * s + ts * c) / (2.0 * t2s * t2s * ts))
    a, b, d = a[:, None, None], b[:, None, None], d[:, None, None]
    return 0.5 * Rh + a * (PR + RP + PRP) + b * (P @ PR + RP @ P - 3.0 * PRP) + d * (PRP @ P + P @ PRP)


def se3_left_jacobian_inv_batch(xi):
    xi = np.asarray(xi, dtype=float).reshape(-1, 6)
    rho, phi = xi[:, :3], xi[:, 3:]
    Jinv = so3_left_jacobian_inv_batch(phi)
    Q = _se3_q_batch(rho, phi)
    out = np.zeros((len(xi), 6, 6))
    out[:, :3, :3] = Jinv
    out[:, 3:, 3:] = Jinv
    out[:, :3, 3:] = -Jinv @ Q @ Jinv
    return out


def se3_log_batch(R, t):
    """Tangent vectors ``(rho, phi)`` of transforms given as rotation and translation arrays."""
    phi = so3_log_batch(R)
    rho = np.einsum("nij,nj->ni", so3_left_jacobian_inv_batch(phi), np.asarray(t, dtype=float).reshape(-1, 3))
    return np.concatenate([rho, phi], axis=1)


def se3_exp_batch(xi):
    """Rotation and translation arrays of ``Exp(xi)``."""
    xi = np.asarray(xi, dtype=float).reshape(-1, 6)
    rho, phi = xi[:, :3], xi[:, 3:]
    th = np.linalg.norm(phi, axis=1)
    small = th < 1e-6
    ts = np.where(small, 1.0, th)
    K = skew_batch(phi)
    a = np.where(small, 0.5, (1.0 - np.cos(ts)) / (ts * ts))
    b = np.where(small, 1.0 / 6.0, (ts - np.sin(ts)) / (ts * ts * ts))
    V = np.eye(3) + a[:, None, None] * K + b[:, None, None] * (K @ K)
    return so3_exp_batch(phi), np.einsum("nij,nj->ni", V, rho)


def adjoint_batch(R, t):
    A = np.zeros((len(R), 6, 6))
    A[:, :3, :3] = R
    A[:, 3:, 3:] = R
    A[:, :3, 3:] = skew_batch(t) @ R
    return A


# ---------------------------------------------------------------------------
# Se3
# ---------------------------------------------------------------------------


def _quat_log(q):
    """Rotation vector of a unit quaternion (accurate all the way to pi)."""
    w, v = (q[0], q[1:]) if q[0] >= 0 else (-q[0], -q[1:])
    s = float(np.linalg.norm(v))
    if s < 1e-12:
        return 2.0 * v / w
    return 2.0 * math.atan2(s, w) / s * v


@dataclass(frozen=True, eq=False)
class Se3:
    """Rigid transform with a unit quaternion rotation ``(w, x, y, z)``."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3).copy())

    # construction -----------------------------------------------------
    @classmethod
    def identity(cls) -> "Se3":
        return cls()

    @classmethod
    def from_rt(cls, R, t) -> "Se3":
        return cls(matrix_to_quat(R), t)

    @classmethod
    def from_matrix(cls, T) -> "Se3":
        T = np.asarray(T, dtype=float)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @classmethod
    def from_rotvec(cls, phi, t=(0.0, 0.0, 0.0)) -> "Se3":
        phi = np.asarray(phi, dtype=float)
        theta = float(np.linalg.norm(phi))
        if theta < 1e-12:
            q = np.array([1.0, *(0.5 * phi)])
        else:
            axis = phi / theta
            q = np.array([math.cos(theta / 2), *(math.sin(theta / 2) * axis)])
        return cls(q, t)

    @classmethod
    def from_yaw(cls, yaw, t=(0.0, 0.0, 0.0)) -> "Se3":
        return cls.from_rotvec([0.0, 0.0, yaw], t)

    @classmethod
    def exp(cls, xi) -> "Se3":
        xi = np.asarray(xi, dtype=float)
        rho, phi = xi[:3], xi[3:]
        R = so3_exp(phi)
        V = so3_left_jacobian(phi)
        return cls.from_rt(R, V @ rho)

    # algebra ------------------------------------------------------------
    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def compose(self, other: "Se3") -> "Se3":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        q = quat_multiply(self.q, other.q)
        t = self.R @ other.t + self.t
        return Se3(q, t)

    __matmul__ = compose

    def inverse(self) -> "Se3":
        qi = np.array([self.q[0], -self.q[1], -self.q[2], -self.q[3]])
        Rt = self.R.T
        return Se3(qi, -Rt @ self.t)

    def act(self, points) -> np.ndarray:
        """Transform one point ``(3,)`` or a batch ``(N, 3)``."""
        p = np.asarray(points, dtype=float)
        return p @ self.R.T + self.t

    def log(self) -> np.ndarray:
        phi = _quat_log(self.q)
        rho = so3_left_jacobian_inv(phi) @ self.t
        return np.concatenate([rho, phi])

    def adjoint(self) -> np.ndarray:
        R = self.R
        A = np.zeros((6, 6))
        A[:3, :3] = R
        A[3:, 3:] = R
        A[:3, 3:] = skew(self.t) @ R
        return A

    def angle(self) -> float:
        """Rotation angle in radians."""
        return float(2.0 * math.atan2(np.linalg.norm(self.q[1:]), abs(self.q[0])))

    def isclose(self, other: "Se3", atol: float = 1e-9) -> bool:
        d = self.inverse() @ other
        return d.angle() <= atol and float(np.linalg.norm(self.t - other.t)) <= atol

    # text ---------------------------------------------------------------
    def to_tum(self) -> str:
        """``tx ty tz qx qy qz qw``."""
        w, x, y, z = self.q
        vals = (*self.t, x, y, z, w)
        return " ".join(repr(float(v)) for v in vals)

    @classmethod
    def from_tum(cls, text) -> "Se3":
        vals = [float(v) for v in (text.split() if isinstance(text, str) else text)]
        if len(vals) != 7:
            raise ValueError(f"expected 7 values, got {len(vals)}")
        tx, ty, tz, qx, qy, qz, qw = vals
        return cls(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))

    def __repr__(self):
        return f"Se3({self.to_tum()})"

    def __eq__(self, other):
        if not isinstance(other, Se3):
            return NotImplemented
        return bool(np.array_equal(self.q, other.q) and np.array_equal(self.t, other.t))

    def __hash__(self):
        return hash((self.q.tobytes(), self.t.tobytes()))


def compose(a: Se3, b: Se3) -> Se3:
    return a.compose(b)


def inverse(a: Se3) -> Se3:
    return a.inverse()


def relative(a: Se3, b: Se3) -> Se3:
    """``inverse(a) ∘ b``."""
    return a.inverse() @ b


def yaw_of(T) -> float:
    """Yaw (rotation about world +Z) of a transform or a 3x3 rotation.

    Z-Y-X Euler convention, result in ``(-pi, pi]``.  Near gimbal lock
    (pitch within 1e-6 of +-pi/2) ``atan2(R10, R00)`` is ill conditioned,
    so roll is folded into yaw instead: ``yaw = atan2(-R01, R11)``.
    """
    R = T.R if isinstance(T, Se3) else np.asarray(T, dtype=float)
    sin_pitch = -R[2, 0]
    if abs(abs(sin_pitch) - 1.0) < 5e-13 or math.hypot(R[0, 0], R[1, 0]) < 1e-6:
        yaw = math.atan2(-R[0, 1], R[1, 1])
    else:
        yaw = math.atan2(R[1, 0], R[0, 0])
    if yaw <= -math.pi:
        yaw += 2.0 * math.pi
    return yaw


def world_relative(a: Se3, b: Se3) -> Se3:
    """Motion from pose ``a`` to pose ``b`` expressed with world-aligned axes.

    Rotation ``R_b R_a^T`` (so its yaw is a heading change about gravity)
    and translation ``t_b - t_a`` (the displacement between the two
    camera centres).
    """
    return Se3.from_rt(b.R @ a.R.T, b.t - a.t)


# ---------------------------------------------------------------------------
# camera
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PinholeCamera:
    fx: float = 400.0
    fy: float = 400.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def in_image(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (uv[..., 0] >= 0) & (uv[..., 0] < self.width) & (uv[..., 1] >= 0) & (uv[..., 1] < self.height)

    def project(self, p):
        """Project one camera-frame point; ``None`` when out of view."""
        X, Y, Z = (float(v) for v in p)
        if not Z > 0.0:
            return None
        u = self.fx * X / Z + self.cx
        v = self.fy * Y / Z + self.cy
        if not (0.0 <= u < self.width and 0.0 <= v < self.height):
            return None
        return np.array([u, v])

    def project_many(self, P):
        """Vectorised projection. Returns ``(uv, valid)``; invalid rows are NaN."""
        P = np.asarray(P, dtype=float).reshape(-1, 3)
        Z = P[:, 2]
        valid = Z > 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([self.fx * P[:, 0] / Z + self.cx, self.fy * P[:, 1] / Z + self.cy], axis=1)
        valid &= self.in_image(uv)
        uv[~valid] = np.nan
        return uv, valid

    def back_project(self, uv, depth=1.0) -> np.ndarray:
        """Ray through pixel ``uv`` scaled so its Z equals ``depth``."""
        uv = np.asarray(uv, dtype=float)
        x = (uv[..., 0] - self.cx) / self.fx
        y = (uv[..., 1] - self.cy) / self.fy
        d = np.asarray(depth, dtype=float)
        return np.stack([x * d, y * d, np.ones_like(x) * d], axis=-1)

    def normalize(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return np.stack([(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy], axis=-1)


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> Se3:
    """Camera pose (world ← camera) with +Z toward ``target`` and image-down along ``-up``."""
    position = np.asarray(position, dtype=float)
    z = np.asarray(target, dtype=float) - position
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Se3.from_rt(np.stack([x, y, z], axis=1), position)
