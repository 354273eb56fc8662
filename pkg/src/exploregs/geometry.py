"""Rigid poses, pinhole cameras and the scaled projection pair.

Conventions used across the package:

* camera frame: x right, y down, z forward (optical axis);
* a :class:`Pose` is world-from-camera, ``x_world = R @ x_cam + t``;
* pixel ``(u, v)`` addresses column ``u`` and row ``v``; integer values are
  pixel centres.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CameraModel:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("camera dimensions must be positive")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def centered(cls, width: int, height: int, focal: float) -> "CameraModel":
        return cls(width, height, float(focal), float(focal), width / 2.0, height / 2.0)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array([
            [1.0 / self.fx, 0.0, -self.cx / self.fx],
            [0.0, 1.0 / self.fy, -self.cy / self.fy],
            [0.0, 0.0, 1.0],
        ])

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(u, v)`` arrays of shape (H, W)."""
        v, u = np.mgrid[0:self.height, 0:self.width]
        return u.astype(float), v.astype(float)

    def ray_directions(self) -> np.ndarray:
        """Unnormalised camera-frame directions ``K^-1 [u, v, 1]`` as (H, W, 3)."""
        u, v = self.pixel_grid()
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_yaw(cls, position, yaw: float) -> "Pose":
        """Level camera at ``position`` looking along world heading ``yaw`` (z up)."""
        c, s = np.cos(yaw), np.sin(yaw)
        # columns: camera x (right), y (down), z (forward) in world coordinates
        R = np.array([[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]])
        return cls(R, position)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) <= tol)

    @property
    def center(self) -> np.ndarray:
        return self.translation

    @property
    def yaw(self) -> float:
        forward = self.rotation[:, 2]
        return float(np.arctan2(forward[1], forward[0]))


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w) -> np.ndarray:
    """Rodrigues' formula for an axis-angle vector."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < 1e-12:
        return np.eye(3) + W + 0.5 * W @ W
    return np.eye(3) + np.sin(theta) / theta * W + (1 - np.cos(theta)) / theta**2 * W @ W


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    if theta < 1e-12:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if np.pi - theta < 1e-6:
        # near pi: axis from the symmetric part
        A = (R + np.eye(3)) / 2.0
        axis = A[np.argmax(np.diag(A))]
        axis = axis / np.linalg.norm(axis)
        return theta * axis
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * np.sin(theta)) * w


def orthonormalize(R) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


def rotation_angle(R) -> float:
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if w.ndim == 0 else w


def yaw_difference(a: float, b: float) -> float:
    """|a - b| wrapped into [0, pi]."""
    return abs(wrap_angle(b - a))


class BehindCameraError(ValueError):
    pass


def project(cam: CameraModel, pose: Pose, sigma: float, x):
    """Project world point(s) through scale ``sigma``, pose and intrinsics.

    Returns ``(u, v, depth)``; depth is the scaled camera-frame z.
    """
    x = np.asarray(x, dtype=float)
    pc = sigma * ((x - pose.translation) @ pose.rotation)
    z = pc[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("behind camera")
    u = cam.fx * pc[..., 0] / z + cam.cx
    v = cam.fy * pc[..., 1] / z + cam.cy
    return u, v, z


def backproject(sigma: float, cam: CameraModel, pose: Pose, Z, u, v) -> np.ndarray:
    """World point seen at pixel ``(u, v)`` with camera depth ``Z``.

    ``x = R (K^-1 Z [u, v, 1]) / sigma + t``; the exact inverse of :func:`project`.
    """
    Z = np.asarray(Z, dtype=float)
    if np.any(Z <= 0):
        raise ValueError("depth must be positive")
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    pc = np.stack([(u - cam.cx) / cam.fx * Z, (v - cam.cy) / cam.fy * Z, Z], axis=-1)
    return pc @ pose.rotation.T / sigma + pose.translation
