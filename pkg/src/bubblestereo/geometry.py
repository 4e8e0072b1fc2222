"""Camera models, projection, triangulation and epipolar geometry.

Conventions used throughout the package:

* 3D coordinates are in millimeters, 2D coordinates in pixels.
* The world frame coincides with the first camera's frame; the pose of
  the second camera maps world points into its own frame (``X_c = R X + t``).
* Detected image coordinates are assumed to be lens-distortion free
  (images are undistorted during background removal), so the epipolar
  and conic machinery work in undistorted pixel space.

All types are immutable after construction and every operation is a pure
function, so they can be shared freely between threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

__all__ = [
    "BehindCameraError",
    "DegenerateTriangulationError",
    "Intrinsics",
    "Pose",
    "Ray",
    "StereoRig",
    "back_project",
    "back_project_pinhole",
    "epipolar_distance",
    "epipolar_distances",
    "epipolar_line",
    "epipole_in_cam2",
    "fundamental_matrix",
    "load_rig",
    "project",
    "project_pinhole",
    "projection_matrix",
    "save_rig",
    "triangulate_midpoint",
]


class BehindCameraError(ValueError):
    """A 3D point lies at or behind the camera's principal plane."""


class DegenerateTriangulationError(ValueError):
    """Two viewing rays are too close to parallel to triangulate."""


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(a, dtype=float))
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Intrinsics:
    """Perspective intrinsics with Brown radial/tangential distortion.

    ``fx, fy, cx, cy`` are in pixels; ``k1, k2`` are the radial and
    ``p1, p2`` the tangential distortion coefficients acting on
    normalized image coordinates.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        """3x3 calibration matrix (no distortion)."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def distort(self, xn: np.ndarray) -> np.ndarray:
        """Apply Brown distortion to normalized coordinates (..., 2)."""
        xn = np.asarray(xn, dtype=float)
        x, y = xn[..., 0], xn[..., 1]
        r2 = x * x + y * y
        radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
        xd = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x)
        yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y
        return np.stack([xd, yd], axis=-1)

    def undistort(self, xd: np.ndarray, max_iter: int = 20, tol: float = 1e-8) -> np.ndarray:
        """Invert :meth:`distort` by fixed-point iteration.

        There is no closed form; the iteration converges quickly for the
        moderate coefficients of real lenses.
        """
        xd = np.asarray(xd, dtype=float)
        xu = xd.copy()
        for _ in range(max_iter):
            x, y = xu[..., 0], xu[..., 1]
            r2 = x * x + y * y
            radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
            dx = 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x)
            dy = self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y
            xu_new = np.stack([(xd[..., 0] - dx) / radial, (xd[..., 1] - dy) / radial], axis=-1)
            step = np.max(np.abs(xu_new - xu)) if xu.size else 0.0
            xu = xu_new
            if step < tol:
                break
        return xu

    def pixel_from_normalized(self, xn: np.ndarray) -> np.ndarray:
        xn = np.asarray(xn, dtype=float)
        return np.stack(
            [self.fx * xn[..., 0] + self.cx, self.fy * xn[..., 1] + self.cy], axis=-1
        )

    def normalized_from_pixel(self, px: np.ndarray) -> np.ndarray:
        px = np.asarray(px, dtype=float)
        return np.stack(
            [(px[..., 0] - self.cx) / self.fx, (px[..., 1] - self.cy) / self.fy], axis=-1
        )

    def undistort_pixel(self, px: np.ndarray) -> np.ndarray:
        """Map distorted pixel coordinates to their undistorted positions."""
        return self.pixel_from_normalized(self.undistort(self.normalized_from_pixel(px)))

    def distort_pixel(self, px: np.ndarray) -> np.ndarray:
        """Map undistorted pixel coordinates to their distorted positions."""
        return self.pixel_from_normalized(self.distort(self.normalized_from_pixel(px)))

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "k1": self.k1, "k2": self.k2, "p1": self.p1, "p2": self.p2,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Intrinsics":
        return cls(**{k: float(d[k]) for k in ("fx", "fy", "cx", "cy", "k1", "k2", "p1", "p2")})


@dataclass(frozen=True)
class Pose:
    """Rigid world-to-camera transform: ``X_cam = rotation @ X + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        R = _readonly(np.asarray(self.rotation, dtype=float).reshape(3, 3))
        t = _readonly(np.asarray(self.translation, dtype=float).reshape(3))
        if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-9 or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quaternion(cls, q_wxyz, t) -> "Pose":
        w, x, y, z = np.asarray(q_wxyz, dtype=float)
        R = Rotation.from_quat([x, y, z, w]).as_matrix()
        return cls(R, t)

    def as_quaternion(self) -> np.ndarray:
        """Quaternion as (w, x, y, z) with non-negative w."""
        x, y, z, w = Rotation.from_matrix(self.rotation).as_quat()
        q = np.array([w, x, y, z])
        return -q if w < 0 else q

    @property
    def camera_center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def transform(self, X: np.ndarray) -> np.ndarray:
        """World points (..., 3) to camera frame."""
        X = np.asarray(X, dtype=float)
        return X @ self.rotation.T + self.translation

    def is_identity(self, tol: float = 1e-12) -> bool:
        return (
            np.allclose(self.rotation, np.eye(3), atol=tol)
            and np.allclose(self.translation, 0.0, atol=tol)
        )


@dataclass(frozen=True)
class Ray:
    """Half-line ``origin + d * direction`` with a unit direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self) -> None:
        o = _readonly(np.asarray(self.origin, dtype=float).reshape(3))
        d = np.asarray(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(d)
        if n == 0:
            raise ValueError("ray direction must be nonzero")
        d = _readonly(d / n)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def point_at(self, distance: float) -> np.ndarray:
        return self.origin + float(distance) * self.direction


@dataclass(frozen=True)
class StereoRig:
    """Calibrated two-camera rig; camera 1 is the world origin."""

    cam1: Intrinsics
    cam2: Intrinsics
    pose2: Pose
    pose1: Pose = field(default_factory=Pose.identity)

    def __post_init__(self) -> None:
        if not self.pose1.is_identity(tol=1e-9):
            raise ValueError("pose1 must be the identity transform")
        if np.linalg.norm(self.pose2.translation) <= 0:
            raise ValueError("baseline length must be positive")

    @property
    def baseline(self) -> float:
        return float(np.linalg.norm(self.pose2.translation))

    def with_pose2(self, pose2: Pose) -> "StereoRig":
        return StereoRig(cam1=self.cam1, cam2=self.cam2, pose2=pose2)


def project(intr: Intrinsics, pose: Pose, X: np.ndarray) -> np.ndarray:
    """Project world points (..., 3) to distorted pixel coordinates (..., 2).

    Raises :class:`BehindCameraError` if any point has non-positive depth.
    """
    Xc = pose.transform(X)
    z = Xc[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point at or behind the camera plane")
    xn = Xc[..., :2] / z[..., None]
    return intr.pixel_from_normalized(intr.distort(xn))


def project_pinhole(intr: Intrinsics, pose: Pose, X: np.ndarray) -> np.ndarray:
    """Like :func:`project` but without distortion (undistorted pixel space)."""
    Xc = pose.transform(X)
    z = Xc[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point at or behind the camera plane")
    return intr.pixel_from_normalized(Xc[..., :2] / z[..., None])


def back_project(intr: Intrinsics, pose: Pose, px: np.ndarray) -> Ray:
    """Viewing ray through a distorted pixel, in world coordinates."""
    xn = intr.undistort(intr.normalized_from_pixel(np.asarray(px, dtype=float)))
    d_cam = np.array([xn[0], xn[1], 1.0])
    d_world = pose.rotation.T @ d_cam
    return Ray(pose.camera_center, d_world)


def back_project_pinhole(intr: Intrinsics, pose: Pose, px: np.ndarray) -> Ray:
    """Viewing ray through an undistorted pixel."""
    xn = intr.normalized_from_pixel(np.asarray(px, dtype=float))
    d_world = pose.rotation.T @ np.array([xn[0], xn[1], 1.0])
    return Ray(pose.camera_center, d_world)


def triangulate_midpoint(ray1: Ray, ray2: Ray) -> tuple[np.ndarray, float]:
    """Midpoint of the mutual perpendicular between two rays.

    Returns ``(X, gap)`` where ``gap`` is the closest-approach distance.
    Raises :class:`DegenerateTriangulationError` for near-parallel rays.
    """
    d1, d2 = ray1.direction, ray2.direction
    b = float(d1 @ d2)
    denom = 1.0 - b * b  # sin^2 of the ray angle for unit directions
    if abs(denom) < 1e-18:
        raise DegenerateTriangulationError("rays are (near-)parallel")
    w0 = ray1.origin - ray2.origin
    d = float(d1 @ w0)
    e = float(d2 @ w0)
    s = (b * e - d) / denom
    t = (e - b * d) / denom
    p1 = ray1.origin + s * d1
    p2 = ray2.origin + t * d2
    gap = float(np.linalg.norm(p1 - p2))
    return 0.5 * (p1 + p2), gap


def projection_matrix(intr: Intrinsics, pose: Pose) -> np.ndarray:
    """3x4 pinhole projection matrix ``K [R | t]`` (undistorted pixel space)."""
    return intr.K @ np.hstack([pose.rotation, pose.translation.reshape(3, 1)])


def _cross_matrix(t: np.ndarray) -> np.ndarray:
    return np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0.0]])


def fundamental_matrix(rig: StereoRig) -> np.ndarray:
    """Fundamental matrix for undistorted pixels: ``x2^T F x1 = 0``."""
    R, t = rig.pose2.rotation, rig.pose2.translation
    F = np.linalg.inv(rig.cam2.K).T @ _cross_matrix(t) @ R @ np.linalg.inv(rig.cam1.K)
    return F


def epipolar_line(rig: StereoRig, x1: np.ndarray) -> np.ndarray:
    """Epipolar line in camera 2 of an undistorted pixel in camera 1.

    Returned as coefficients ``(a, b, c)`` normalized to ``a^2 + b^2 = 1``,
    so ``|a u + b v + c|`` is the point-line distance in pixels.
    """
    x1 = np.asarray(x1, dtype=float)
    line = fundamental_matrix(rig) @ np.array([x1[0], x1[1], 1.0])
    n = np.hypot(line[0], line[1])
    if n == 0:
        raise ValueError("degenerate epipolar line (point is the epipole)")
    return line / n


def epipolar_distance(rig: StereoRig, x1: np.ndarray, x2: np.ndarray) -> float:
    """Symmetric epipolar distance of an undistorted pixel pair, in px.

    Mean of the distance of ``x2`` to the epipolar line of ``x1`` and of
    ``x1`` to the epipolar line of ``x2``.
    """
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    F = fundamental_matrix(rig)
    x1h = np.array([x1[0], x1[1], 1.0])
    x2h = np.array([x2[0], x2[1], 1.0])
    l2 = F @ x1h
    l1 = F.T @ x2h
    d2 = abs(l2 @ x2h) / np.hypot(l2[0], l2[1])
    d1 = abs(l1 @ x1h) / np.hypot(l1[0], l1[1])
    return 0.5 * float(d1 + d2)


def epipolar_distances(rig: StereoRig, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Vectorized :func:`epipolar_distance` over matched point arrays (N, 2)."""
    x1 = np.atleast_2d(np.asarray(x1, dtype=float))
    x2 = np.atleast_2d(np.asarray(x2, dtype=float))
    F = fundamental_matrix(rig)
    x1h = np.column_stack([x1, np.ones(len(x1))])
    x2h = np.column_stack([x2, np.ones(len(x2))])
    l2 = x1h @ F.T  # lines in image 2
    l1 = x2h @ F  # lines in image 1
    d2 = np.abs(np.sum(l2 * x2h, axis=1)) / np.hypot(l2[:, 0], l2[:, 1])
    d1 = np.abs(np.sum(l1 * x1h, axis=1)) / np.hypot(l1[:, 0], l1[:, 1])
    return 0.5 * (d1 + d2)


def epipole_in_cam2(rig: StereoRig) -> np.ndarray:
    """Image of camera 1's center in camera 2 (undistorted pixels)."""
    e = rig.cam2.K @ rig.pose2.translation
    return e[:2] / e[2]


# ---------------------------------------------------------------------------
# Calibration file I/O
# ---------------------------------------------------------------------------

def save_rig(rig: StereoRig, path: str | Path, recalibrated: bool = False) -> None:
    """Write a rig as JSON (intrinsics per camera, pose2 as quaternion wxyz + t)."""
    doc = {
        "cam1": rig.cam1.to_dict(),
        "cam2": rig.cam2.to_dict(),
        "pose2": {
            "q": [float(v) for v in rig.pose2.as_quaternion()],
            "t": [float(v) for v in rig.pose2.translation],
        },
        "recalibrated": bool(recalibrated),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_rig(path: str | Path) -> StereoRig:
    doc = json.loads(Path(path).read_text())
    pose2 = Pose.from_quaternion(doc["pose2"]["q"], doc["pose2"]["t"])
    return StereoRig(
        cam1=Intrinsics.from_dict(doc["cam1"]),
        cam2=Intrinsics.from_dict(doc["cam2"]),
        pose2=pose2,
    )
