"""Rigid-body transforms, quaternions, bearing rays and Plücker lines.

Quaternions are scalar-first ``(w, x, y, z)`` and canonicalized to ``w >= 0``.
A pose ``T_ab`` maps points expressed in frame ``b`` into frame ``a``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(W: np.ndarray) -> np.ndarray:
    return 0.5 * np.array([W[2, 1] - W[1, 2], W[0, 2] - W[2, 0], W[1, 0] - W[0, 1]])


# ---------------------------------------------------------------------------
# quaternions
# ---------------------------------------------------------------------------

def quat_canonical(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return -q if q[0] < 0 else q.copy()


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    # leave unit quaternions bit-exact so decode(encode(x)) is the identity
    return quat_canonical(q if abs(n - 1.0) <= 4 * np.finfo(float).eps else q / n)


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]], dtype=float)


def quat_vec(q) -> np.ndarray:
    """Vector part ``(x, y, z)`` of a unit quaternion, after canonicalization."""
    return quat_canonical(q)[1:].copy()


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(R) -> np.ndarray:
    # Shepperd's method, branch on the largest diagonal term for stability
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return quat_canonical(np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis]))


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    th = np.linalg.norm(w)
    W = skew(w)
    if th < 1e-8:
        return np.eye(3) + W + 0.5 * W @ W
    return np.eye(3) + np.sin(th) / th * W + (1 - np.cos(th)) / th**2 * W @ W


def so3_log(R) -> np.ndarray:
    # via quaternion: robust near 0 and pi
    q = quat_from_matrix(R)
    v = q[1:]
    s = np.linalg.norm(v)
    if s < 1e-12:
        return 2.0 * v
    return 2.0 * np.arctan2(s, q[0]) * v / s


def quat_exp(w) -> np.ndarray:
    """Unit quaternion of the rotation vector ``w``."""
    w = np.asarray(w, dtype=float)
    th = np.linalg.norm(w)
    if th < 1e-12:
        return quat_normalize(np.concatenate([[1.0], 0.5 * w]))
    return quat_canonical(np.concatenate([[np.cos(th / 2)], np.sin(th / 2) * w / th]))


def rotation_angle(R) -> float:
    return float(np.linalg.norm(so3_log(R)))


def nearest_rotation(M) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


# ---------------------------------------------------------------------------
# poses
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform with unit quaternion ``q`` (w, x, y, z) and translation ``p``."""

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = quat_normalize(self.q)
        p = np.array(self.p, dtype=float).reshape(3)
        q.flags.writeable = False
        p.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def from_Rt(cls, R, t) -> "Pose":
        return cls(quat_from_matrix(R), t)

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls.from_Rt(T[:3, :3], T[:3, 3])

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.p
        return T

    def inverse(self) -> "Pose":
        return inverse(self)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def apply(self, pts) -> np.ndarray:
        """Transform points of shape (3,) or (N, 3)."""
        pts = np.asarray(pts, dtype=float)
        return pts @ self.R.T + self.p

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.q, self.p])

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.q, other.q, atol=atol) and np.allclose(self.p, other.p, atol=atol))

    def __repr__(self):
        return f"Pose(q={np.array2string(self.q, precision=6)}, p={np.array2string(self.p, precision=6)})"


def compose(a: Pose, b: Pose) -> Pose:
    """Return ``T_a * T_b``."""
    return Pose(quat_mul(a.q, b.q), a.R @ b.p + a.p)


def inverse(a: Pose) -> Pose:
    qi = quat_conj(a.q)
    return Pose(qi, -(quat_to_matrix(qi) @ a.p))


def relative(a: Pose, b: Pose) -> Pose:
    """``T_ab = T_wa^-1 T_wb``."""
    return compose(inverse(a), b)


def pose_error(a: Pose, b: Pose) -> tuple[float, float]:
    """(rotation angle in rad, translation distance in m) between two poses."""
    dR = a.R.T @ b.R
    return rotation_angle(dR), float(np.linalg.norm(a.p - b.p))


def pose_delta_vector(ref: Pose, other: Pose) -> np.ndarray:
    """``[dp; 2 vec(dq)]`` of ``ref^-1 * other``."""
    d = compose(inverse(ref), other)
    return np.concatenate([d.p, 2.0 * quat_vec(d.q)])


# ---------------------------------------------------------------------------
# cameras and rays
# ---------------------------------------------------------------------------

class PluckerLine(NamedTuple):
    d: np.ndarray  # unit direction
    m: np.ndarray  # moment c x d


def pixel_to_ray(u, v, fx, fy, cx, cy) -> np.ndarray:
    """Unit bearing of pixel(s). Accepts scalars or arrays; returns (3,) or (N, 3)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    r = np.stack([(u - cx) / fx, (v - cy) / fy, np.ones_like(u)], axis=-1)
    return r / np.linalg.norm(r, axis=-1, keepdims=True)


def project_ray(ray, fx, fy, cx, cy) -> np.ndarray:
    """Pixel coordinates of bearing(s) with positive z."""
    ray = np.asarray(ray, dtype=float)
    x = ray[..., 0] / ray[..., 2]
    y = ray[..., 1] / ray[..., 2]
    return np.stack([fx * x + cx, fy * y + cy], axis=-1)


def plucker_from_camera(ray, cam_in_rig: Pose) -> PluckerLine:
    """Plücker line(s) in the rig frame of bearing(s) seen by a camera at ``cam_in_rig``."""
    d = np.asarray(ray, dtype=float) @ cam_in_rig.R.T
    m = np.cross(cam_in_rig.p, d)
    return PluckerLine(d, m)
