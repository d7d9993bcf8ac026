"""Rigid-body transforms and rotation helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit ``axis``."""
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + x * x * C, x * y * C - z * s, x * z * C + y * s],
        [y * x * C + z * s, c + y * y * C, y * z * C - x * s],
        [z * x * C - y * s, z * y * C + x * s, c + z * z * C],
    ])


def rot_x(a: float) -> np.ndarray:
    return axis_angle_matrix((1.0, 0.0, 0.0), a)


def rot_y(a: float) -> np.ndarray:
    return axis_angle_matrix((0.0, 1.0, 0.0), a)


def rot_z(a: float) -> np.ndarray:
    return axis_angle_matrix((0.0, 0.0, 1.0), a)


def rpy_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Fixed-axis XYZ (roll about x, then pitch about y, then yaw about z)."""
    return rot_z(yaw) @ rot_y(pitch) @ rot_x(roll)


def rotation_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector (axis * angle) of a rotation matrix.

    Handles the angle ~ pi branch, where the skew part vanishes and the
    axis has to be recovered from the symmetric part.
    """
    R = np.asarray(R, dtype=float)
    cos_t = min(1.0, max(-1.0, (R[0, 0] + R[1, 1] + R[2, 2] - 1.0) / 2.0))
    sx, sy, sz = R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]
    sin_t = 0.5 * math.sqrt(sx * sx + sy * sy + sz * sz)
    theta = math.atan2(sin_t, cos_t)
    if theta < 1e-7:
        # first-order expansion; exact enough below 1e-7 rad
        return np.array([0.5 * sx, 0.5 * sy, 0.5 * sz])
    if math.pi - theta > 1e-4:
        k = theta / (2.0 * math.sin(theta))
        return np.array([k * sx, k * sy, k * sz])
    # near pi: R ~ 2 a a^T - I
    skew = np.array([sx, sy, sz])
    B = (R + np.eye(3)) / 2.0
    k = int(np.argmax(np.diag(B)))
    axis = B[:, k] / math.sqrt(max(B[k, k], 1e-300))
    axis /= np.linalg.norm(axis)
    if axis @ skew < 0:
        axis = -axis
    return theta * axis


def orientation_error(R_target: np.ndarray, R_current: np.ndarray) -> np.ndarray:
    """Axis-angle of ``R_target @ R_current.T`` (world frame)."""
    return rotation_log(np.asarray(R_target) @ np.asarray(R_current).T)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(self.translation)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError(f"rotation determinant {np.linalg.det(R)!r} != 1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, xyz) -> "RigidTransform":
        return cls(np.eye(3), xyz)

    @classmethod
    def from_rpy(cls, xyz=(0.0, 0.0, 0.0), rpy=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(rpy_matrix(*rpy), xyz)

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform a point or an (N, 3) array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def __eq__(self, other) -> bool:
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __repr__(self) -> str:
        return (f"RigidTransform(rotation={self.rotation.tolist()}, "
                f"translation={self.translation.tolist()})")
