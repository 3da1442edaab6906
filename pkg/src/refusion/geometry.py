"""Pinhole camera model and SE(3) pose algebra.

Poses map camera coordinates to world coordinates: a point ``p`` observed by
a camera with pose ``T`` sits at ``transform(T, p)`` in the world.  All
arrays are float64; rotations are 3x3 matrices kept orthonormal to 1e-6.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidDepthError, InvalidProjectionError

ORTHONORMAL_TOL = 1e-6

# Scale applied to (euler, translation) differences when measuring how far a
# pose moved: rotation angles count double.
DEFAULT_DISTANCE_SCALE = np.array([2.0, 2.0, 2.0, 1.0, 1.0, 1.0])


@dataclass
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass
class Pose:
    """Rigid-body transform: ``p_world = rotation @ p_cam + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > ORTHONORMAL_TOL:
            raise ValueError(f"rotation not orthonormal (err={err:.2e})")
        if abs(np.linalg.det(self.rotation) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation must have determinant +1")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def copy(self) -> "Pose":
        return Pose(self.rotation.copy(), self.translation.copy())


@dataclass
class PoseVector:
    """Euler angles (radians) and translation (meters) of a pose."""

    euler: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        self.euler = np.asarray(self.euler, dtype=np.float64).reshape(3)
        self.trans = np.asarray(self.trans, dtype=np.float64).reshape(3)
        if not (np.isfinite(self.euler).all() and np.isfinite(self.trans).all()):
            raise ValueError("pose vector entries must be finite")


def project(p, k: Intrinsics) -> np.ndarray:
    """Project camera-space point(s) to real-valued pixel coordinates."""
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise InvalidProjectionError("point(s) behind the camera")
    u = k.cx + k.fx * p[..., 0] / z
    v = k.cy + k.fy * p[..., 1] / z
    return np.stack([u, v], axis=-1)


def unproject(x, z, k: Intrinsics) -> np.ndarray:
    """Lift pixel coordinates and depth back to a camera-space point."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise InvalidDepthError("depth must be positive")
    px = (x[..., 0] - k.cx) / k.fx * z
    py = (x[..., 1] - k.cy) / k.fy * z
    return np.stack([px, py, np.broadcast_to(z, px.shape)], axis=-1)


def transform(T: Pose, p) -> np.ndarray:
    """Apply ``R p + t`` to a point or an (N, 3) batch."""
    p = np.asarray(p, dtype=np.float64)
    return p @ T.rotation.T + T.translation


def compose(T: Pose, U: Pose) -> Pose:
    """Pose composition: ``compose(T, U)`` applies U first, then T."""
    return Pose(T.rotation @ U.rotation, T.rotation @ U.translation + T.translation)


def inverse(T: Pose) -> Pose:
    R_inv = T.rotation.T
    return Pose(R_inv, -R_inv @ T.translation)


def rotation_x(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def rotation_y(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


def rotation_z(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def rotation_from_euler_zyx(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Intrinsic Z-Y-X rotation: yaw about z, then pitch about y, then roll about x."""
    return rotation_z(yaw) @ rotation_y(pitch) @ rotation_x(roll)


def euler_zyx(R: np.ndarray) -> np.ndarray:
    """Extract (yaw, pitch, roll) with pitch constrained to [-pi/2, pi/2].

    At the gimbal singularity (|pitch| = pi/2) roll is set to zero and the
    remaining freedom is folded into yaw, which keeps the extraction
    deterministic.
    """
    sp = -R[2, 0]
    sp = min(1.0, max(-1.0, sp))
    pitch = np.arcsin(sp)
    if abs(sp) < 1.0 - 1e-12:
        yaw = np.arctan2(R[1, 0], R[0, 0])
        roll = np.arctan2(R[2, 1], R[2, 2])
    else:
        # R reduces to a single yaw-like rotation; attribute everything to yaw.
        yaw = np.arctan2(-R[0, 1], R[1, 1])
        roll = 0.0
    return np.array([yaw, pitch, roll], dtype=np.float64)


def pose_vector(T: Pose) -> PoseVector:
    return PoseVector(euler_zyx(T.rotation), T.translation.copy())


def wrap_angle(a):
    """Wrap angle(s) into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2.0 * np.pi)


def pose_distance(T: Pose, U: Pose, s: np.ndarray = DEFAULT_DISTANCE_SCALE) -> float:
    """Scaled Euclidean distance between the pose vectors of T and U.

    Euler differences are wrapped into (-pi, pi] first, so nearly identical
    orientations on opposite sides of the +-pi seam measure as close.
    """
    a, b = pose_vector(T), pose_vector(U)
    d = np.concatenate([wrap_angle(a.euler - b.euler), a.trans - b.trans])
    return float(np.linalg.norm(np.asarray(s, dtype=np.float64) * d))


def rotation_from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0 or angle == 0:
        return np.eye(3)
    x, y, z = axis / n
    K = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def axis_angle_from_rotation(R: np.ndarray):
    """Inverse of Rodrigues: returns (unit axis, angle in [0, pi])."""
    cos_a = min(1.0, max(-1.0, (np.trace(R) - 1.0) / 2.0))
    angle = float(np.arccos(cos_a))
    if angle < 1e-12:
        return np.array([1.0, 0.0, 0.0]), 0.0
    if np.pi - angle < 1e-6:
        # Axis from the symmetric part: R = 2 a a^T - I at angle pi.
        M = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(M), 0.0))
        k = int(np.argmax(axis))
        if axis[k] > 0:
            axis = M[:, k] / axis[k]
        return axis / np.linalg.norm(axis), angle
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return v / (2.0 * np.sin(angle)), angle


def rotation_angle(R: np.ndarray) -> float:
    """Magnitude of the rotation in radians."""
    return axis_angle_from_rotation(R)[1]


def pose_interpolate(T: Pose, U: Pose, t: float) -> Pose:
    """Geodesic interpolation from T (t=0) to U (t=1)."""
    rel_R = T.rotation.T @ U.rotation
    axis, angle = axis_angle_from_rotation(rel_R)
    R = T.rotation @ rotation_from_axis_angle(axis, angle * t)
    trans = (1.0 - t) * T.translation + t * U.translation
    return Pose(R, trans)


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    """Hamilton quaternion (x, y, z, w) to rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=np.float64)
    n = np.sqrt(x * x + y * y + z * z + w * w)
    if n == 0:
        raise ValueError("zero quaternion")
    x, y, z, w = x / n, y / n, z / n, w / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to Hamilton quaternion (x, y, z, w), w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    else:
        i = int(np.argmax(np.diag(R)))
        if i == 0:
            s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
            x, w = 0.25 * s, (R[2, 1] - R[1, 2]) / s
            y, z = (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s
        elif i == 1:
            s = np.sqrt(1.0 - R[0, 0] + R[1, 1] - R[2, 2]) * 2.0
            y, w = 0.25 * s, (R[0, 2] - R[2, 0]) / s
            x, z = (R[0, 1] + R[1, 0]) / s, (R[1, 2] + R[2, 1]) / s
        else:
            s = np.sqrt(1.0 - R[0, 0] - R[1, 1] + R[2, 2]) * 2.0
            z, w = 0.25 * s, (R[1, 0] - R[0, 1]) / s
            x, y = (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s
    q = np.array([x, y, z, w])
    if w < 0:
        q = -q
    return q / np.linalg.norm(q)


def ray_grid(k: Intrinsics):
    """Per-pixel ray directions at unit depth: ((u-cx)/fx, (v-cy)/fy, 1).

    Returns (dir_x, dir_y) arrays of shape (height, width).
    """
    u = np.arange(k.width, dtype=np.float64)
    v = np.arange(k.height, dtype=np.float64)
    dir_x = np.broadcast_to((u - k.cx) / k.fx, (k.height, k.width))
    dir_y = np.broadcast_to(((v - k.cy) / k.fy)[:, None], (k.height, k.width))
    return np.ascontiguousarray(dir_x), np.ascontiguousarray(dir_y)
