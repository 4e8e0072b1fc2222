"""Ellipsoids, projective quadrics/conics and silhouette-based adjustment.

An ellipsoid with semi-axes ``(a, b, c)``, orientation ``R_e`` and center
``t_e`` is the image of the unit sphere under the point transform

    H = [[R_e @ diag(a, b, c), t_e], [0, 1]]

and its projective quadric is ``Q = H^{-T} diag(1, 1, 1, -1) H^{-1}``:
surface points satisfy ``X~^T Q X~ = 0``. Outlines project linearly in
dual form, ``C* = P Q* P^T`` with ``Q* = Q^{-1}``, which is the basis for
fitting ellipsoids to silhouettes without point correspondences: sampled
silhouette points are pulled onto the projected conic by minimizing the
gradient-normalized algebraic distance ``x^T C x / ||grad(x^T C x)||``.

The same residual, summed over many bubbles and minimized also over the
relative pose of the second camera, recalibrates the stereo extrinsics
from silhouettes alone. The baseline length is held fixed during that
optimization: scaling all ellipsoids and the baseline jointly leaves
every image conic unchanged, so metric scale is unobservable from
silhouettes of unknown-size objects.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import least_squares
from scipy.sparse import lil_matrix
from scipy.spatial.transform import Rotation

from .geometry import (
    Pose,
    StereoRig,
    back_project_pinhole,
    projection_matrix,
    triangulate_midpoint,
)

__all__ = [
    "Conic2D",
    "DegenerateProjectionError",
    "Ellipsoid",
    "NotAnEllipseError",
    "NotAnEllipsoidError",
    "Quadric",
    "RefineResult",
    "SelfCalibrationResult",
    "UnderconstrainedError",
    "ellipsoid_to_quadric",
    "fit_ellipse",
    "init_ellipsoid",
    "project_ellipsoid",
    "project_quadric",
    "quadric_to_ellipsoid",
    "refine_ellipsoid",
    "sample_conic_points",
    "self_calibrate",
]


class NotAnEllipsoidError(ValueError):
    """The quadric does not represent a real, non-degenerate ellipsoid."""


class NotAnEllipseError(ValueError):
    """The conic does not represent a real, non-degenerate ellipse."""


class DegenerateProjectionError(ValueError):
    """Quadric outline cannot be projected (camera too close or inside)."""


class UnderconstrainedError(ValueError):
    """Too few or degenerate observations for self-calibration."""


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(a, dtype=float))
    out.setflags(write=False)
    return out


def _nearest_rotation(M: np.ndarray) -> np.ndarray:
    """Closest rotation in Frobenius norm (polar decomposition, det +1)."""
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Ellipsoid:
    """Solid ellipsoid: center (mm), orientation (world <- body) and semi-axes (mm)."""

    center: np.ndarray
    rotation: np.ndarray
    semi_axes: np.ndarray

    def __post_init__(self) -> None:
        t = _readonly(np.asarray(self.center, dtype=float).reshape(3))
        R = _readonly(np.asarray(self.rotation, dtype=float).reshape(3, 3))
        ax = _readonly(np.asarray(self.semi_axes, dtype=float).reshape(3))
        if np.any(ax <= 0):
            raise ValueError("semi-axes must be positive")
        if np.linalg.norm(R.T @ R - np.eye(3)) > 1e-9 or np.linalg.det(R) < 0:
            raise ValueError("orientation must be orthonormal with determinant +1")
        object.__setattr__(self, "center", t)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "semi_axes", ax)

    @property
    def volume(self) -> float:
        """Enclosed volume 4/3 pi a b c, in mm^3."""
        a, b, c = self.semi_axes
        return 4.0 / 3.0 * np.pi * a * b * c

    @property
    def equivalent_diameter(self) -> float:
        """Diameter of the sphere with the same volume, in mm."""
        return 2.0 * float(np.prod(self.semi_axes)) ** (1.0 / 3.0)

    def surface_points(self, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
        """Sample n points on the surface (random directions if rng given)."""
        if rng is None:
            # deterministic spiral-ish grid over the parametric sphere
            k = np.arange(n) + 0.5
            phi = np.arccos(1.0 - 2.0 * k / n)
            theta = np.pi * (1.0 + 5**0.5) * k
            u = np.column_stack(
                [np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)]
            )
        else:
            u = rng.normal(size=(n, 3))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
        return self.center + (u * self.semi_axes) @ self.rotation.T


@dataclass(frozen=True)
class Quadric:
    """4x4 symmetric point quadric, normalized to unit Frobenius norm.

    Sign is fixed so that the leading 3x3 block has positive trace, which
    makes ``X~^T Q X~`` negative inside an ellipsoid.
    """

    matrix: np.ndarray

    def __post_init__(self) -> None:
        M = np.asarray(self.matrix, dtype=float).reshape(4, 4)
        M = 0.5 * (M + M.T)
        if np.trace(M[:3, :3]) < 0:
            M = -M
        n = np.linalg.norm(M)
        if n == 0:
            raise ValueError("zero quadric")
        object.__setattr__(self, "matrix", _readonly(M / n))

    def evaluate(self, X: np.ndarray) -> np.ndarray:
        """Algebraic residual ``X~^T Q X~`` for points (..., 3)."""
        X = np.asarray(X, dtype=float)
        Xh = np.concatenate([X, np.ones(X.shape[:-1] + (1,))], axis=-1)
        return np.einsum("...i,ij,...j->...", Xh, self.matrix, Xh)

    @property
    def dual(self) -> np.ndarray:
        """Dual (plane) quadric ``Q* = Q^{-1}``, up to scale."""
        return np.linalg.inv(self.matrix)


@dataclass(frozen=True)
class Conic2D:
    """2D ellipse as a 3x3 conic matrix plus its parametric form.

    ``matrix`` is symmetric, unit Frobenius norm, signed so that interior
    points give negative values. ``semi_axes`` is sorted descending and
    ``angle`` is the major-axis direction in radians, in [0, pi).
    """

    matrix: np.ndarray
    center: np.ndarray
    semi_axes: np.ndarray
    angle: float

    @property
    def area(self) -> float:
        return float(np.pi * self.semi_axes[0] * self.semi_axes[1])

    @classmethod
    def from_matrix(cls, C: np.ndarray) -> "Conic2D":
        C = np.asarray(C, dtype=float).reshape(3, 3)
        C = 0.5 * (C + C.T)
        if np.trace(C[:2, :2]) < 0:
            C = -C
        A2 = C[:2, :2]
        b2 = C[:2, 2]
        evals, evecs = np.linalg.eigh(A2)
        if evals[0] <= 1e-14 * max(abs(evals[1]), 1e-300):
            raise NotAnEllipseError("leading 2x2 block is not positive definite")
        center = np.linalg.solve(A2, -b2)
        k = float(center @ A2 @ center - C[2, 2])
        if k <= 0:
            raise NotAnEllipseError("conic has no real points")
        semi = np.sqrt(k / evals)  # descending: evals ascending
        major = evecs[:, 0]
        angle = float(np.arctan2(major[1], major[0])) % np.pi
        C = C / np.linalg.norm(C)
        return cls(_readonly(C), _readonly(center), _readonly(semi), angle)

    @classmethod
    def from_parametric(cls, center, semi_axes, angle: float) -> "Conic2D":
        center = np.asarray(center, dtype=float).reshape(2)
        A, B = np.asarray(semi_axes, dtype=float).reshape(2)
        if A <= 0 or B <= 0:
            raise NotAnEllipseError("semi-axes must be positive")
        if B > A:
            A, B = B, A
            angle = angle + 0.5 * np.pi
        c, s = np.cos(angle), np.sin(angle)
        Rt = np.array([[c, -s], [s, c]])
        A2 = Rt @ np.diag([1.0 / A**2, 1.0 / B**2]) @ Rt.T
        b2 = -A2 @ center
        C = np.empty((3, 3))
        C[:2, :2] = A2
        C[:2, 2] = b2
        C[2, :2] = b2
        C[2, 2] = center @ A2 @ center - 1.0
        C /= np.linalg.norm(C)
        return cls(
            _readonly(C),
            _readonly(center),
            _readonly(np.array([A, B])),
            float(angle) % np.pi,
        )

    def evaluate(self, pts: np.ndarray) -> np.ndarray:
        """Algebraic residual ``x~^T C x~`` for pixel points (..., 2)."""
        return _conic_algebraic(self.matrix, np.asarray(pts, dtype=float))

    def sampson_distance(self, pts: np.ndarray) -> np.ndarray:
        """Gradient-normalized algebraic distance in pixels, signed (< 0 inside)."""
        return _conic_sampson(self.matrix, np.asarray(pts, dtype=float))


def _conic_algebraic(C: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(pts)
    xh = np.column_stack([pts, np.ones(len(pts))])
    return np.einsum("ni,ij,nj->n", xh, C, xh)


def _conic_sampson(C: np.ndarray, pts: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(pts)
    xh = np.column_stack([pts, np.ones(len(pts))])
    f = np.einsum("ni,ij,nj->n", xh, C, xh)
    g = 2.0 * (xh @ C)[:, :2]
    gn = np.linalg.norm(g, axis=1)
    return f / np.maximum(gn, 1e-300)


def sample_conic_points(
    conic: Conic2D,
    n: int = 64,
    noise_px: float = 0.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Sample n points uniformly in the ellipse's parametric angle."""
    t = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    A, B = conic.semi_axes
    c, s = np.cos(conic.angle), np.sin(conic.angle)
    x = A * np.cos(t)
    y = B * np.sin(t)
    pts = np.column_stack([c * x - s * y, s * x + c * y]) + conic.center
    if noise_px > 0:
        if rng is None:
            rng = np.random.default_rng()
        pts = pts + rng.normal(scale=noise_px, size=pts.shape)
    return pts


# ---------------------------------------------------------------------------
# Ellipsoid <-> quadric <-> conic
# ---------------------------------------------------------------------------

def ellipsoid_to_quadric(e: Ellipsoid) -> Quadric:
    """Point quadric of an ellipsoid; surface points satisfy X~^T Q X~ = 0."""
    D_inv = np.diag(1.0 / e.semi_axes) @ e.rotation.T
    H_inv = np.eye(4)
    H_inv[:3, :3] = D_inv
    H_inv[:3, 3] = -D_inv @ e.center
    Qu = np.diag([1.0, 1.0, 1.0, -1.0])
    return Quadric(H_inv.T @ Qu @ H_inv)


def _dual_quadric(e: Ellipsoid) -> np.ndarray:
    """Dual quadric H diag(1,1,1,-1) H^T, cheap closed form used in optimizers."""
    D = e.rotation * e.semi_axes  # R @ diag(a, b, c)
    Qs = np.empty((4, 4))
    Qs[:3, :3] = D @ D.T - np.outer(e.center, e.center)
    Qs[:3, 3] = -e.center
    Qs[3, :3] = -e.center
    Qs[3, 3] = -1.0
    return Qs


def quadric_to_ellipsoid(Q: Quadric) -> Ellipsoid:
    """Recover ellipsoid parameters from a point quadric.

    Semi-axes are sorted descending (with the rotation permuted to match)
    to fix the axis-order ambiguity. Raises :class:`NotAnEllipsoidError`
    for paraboloids, hyperboloids and rank-deficient quadrics.
    """
    M = Q.matrix
    A = M[:3, :3]
    b = M[:3, 3]
    evals, evecs = np.linalg.eigh(A)
    if evals[0] <= 1e-12 * max(abs(evals[2]), 1e-300):
        raise NotAnEllipsoidError("quadric is not an ellipsoid (indefinite or degenerate)")
    center = np.linalg.solve(A, -b)
    k = float(center @ A @ center - M[3, 3])
    if k <= 0:
        raise NotAnEllipsoidError("quadric has no real surface points")
    semi = np.sqrt(k / evals)  # descending since evals ascend
    # deterministic eigenvector signs, then enforce det +1
    for i in range(3):
        col = evecs[:, i]
        if col[np.argmax(np.abs(col))] < 0:
            evecs[:, i] = -col
    if np.linalg.det(evecs) < 0:
        evecs[:, 2] = -evecs[:, 2]
    return Ellipsoid(center=center, rotation=evecs, semi_axes=semi)


def _adjugate3(M: np.ndarray) -> np.ndarray:
    """Adjugate of a 3x3 matrix (proportional to the inverse)."""
    out = np.empty((3, 3))
    out[0, 0] = M[1, 1] * M[2, 2] - M[1, 2] * M[2, 1]
    out[0, 1] = M[0, 2] * M[2, 1] - M[0, 1] * M[2, 2]
    out[0, 2] = M[0, 1] * M[1, 2] - M[0, 2] * M[1, 1]
    out[1, 0] = M[1, 2] * M[2, 0] - M[1, 0] * M[2, 2]
    out[1, 1] = M[0, 0] * M[2, 2] - M[0, 2] * M[2, 0]
    out[1, 2] = M[0, 2] * M[1, 0] - M[0, 0] * M[1, 2]
    out[2, 0] = M[1, 0] * M[2, 1] - M[1, 1] * M[2, 0]
    out[2, 1] = M[0, 1] * M[2, 0] - M[0, 0] * M[2, 1]
    out[2, 2] = M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]
    return out


def _outline_conic_matrix(P: np.ndarray, Qstar: np.ndarray) -> np.ndarray:
    """Unnormalized outline conic matrix of a dual quadric under P."""
    Cstar = P @ Qstar @ P.T
    return _adjugate3(0.5 * (Cstar + Cstar.T))


def project_quadric(P: np.ndarray, Q: Quadric) -> Conic2D:
    """Project a quadric outline: C* = P Q* P^T, returned as C = (C*)^{-1}.

    The camera must be safely outside the quadric; the guard requires the
    camera-to-center distance to exceed 3x the largest semi-axis. Raises
    :class:`DegenerateProjectionError` otherwise, or if the outline is
    not an ellipse.
    """
    P = np.asarray(P, dtype=float).reshape(3, 4)
    e = quadric_to_ellipsoid(Q)
    cam_center = np.linalg.solve(P[:, :3], -P[:, 3])
    if np.linalg.norm(cam_center - e.center) <= 3.0 * float(np.max(e.semi_axes)):
        raise DegenerateProjectionError("camera too close to (or inside) the quadric")
    C = _outline_conic_matrix(P, Q.dual)
    try:
        return Conic2D.from_matrix(C)
    except NotAnEllipseError as err:
        raise DegenerateProjectionError(f"outline is not an ellipse: {err}") from err


def project_ellipsoid(rig_intr, pose: Pose, e: Ellipsoid) -> Conic2D:
    """Outline of an ellipsoid in a camera (undistorted pixel space)."""
    P = projection_matrix(rig_intr, pose)
    return project_quadric(P, ellipsoid_to_quadric(e))


# ---------------------------------------------------------------------------
# Direct least-squares ellipse fit (Fitzgibbon, numerically stabilized)
# ---------------------------------------------------------------------------

def fit_ellipse(points: np.ndarray) -> Conic2D:
    """Fit an ellipse to 2D points by direct least squares.

    Solves the conic fit constrained to ellipses (4ac - b^2 = 1) via the
    stabilized block decomposition; points are centered and scaled first
    for conditioning. Needs at least 5 points in general position.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < 5:
        raise NotAnEllipseError("need at least 5 points to fit an ellipse")
    mean = pts.mean(axis=0)
    scale = float(np.sqrt(((pts - mean) ** 2).sum(axis=1).mean()))
    if scale <= 0:
        raise NotAnEllipseError("degenerate point set")
    x, y = ((pts - mean) / scale).T

    D1 = np.column_stack([x * x, x * y, y * y])
    D2 = np.column_stack([x, y, np.ones_like(x)])
    S1 = D1.T @ D1
    S2 = D1.T @ D2
    S3 = D2.T @ D2
    try:
        T = -np.linalg.solve(S3, S2.T)
    except np.linalg.LinAlgError as err:
        raise NotAnEllipseError("degenerate point set") from err
    M = S1 + S2 @ T
    M = np.array([M[2] / 2.0, -M[1], M[0] / 2.0])
    evals, evecs = np.linalg.eig(M)
    real = np.abs(evals.imag) < 1e-9 * (1.0 + np.abs(evals.real))
    v = evecs.real
    cond = 4.0 * v[0] * v[2] - v[1] ** 2
    ok = np.where(real & (cond > 0))[0]
    if len(ok) == 0:
        raise NotAnEllipseError("no ellipse solution for the given points")
    a1 = v[:, ok[0]]
    coeffs = np.concatenate([a1, T @ a1])  # A, B, C, D, E, F

    A, B, C, D, E, F = coeffs
    Cn = np.array([[A, B / 2.0, D / 2.0], [B / 2.0, C, E / 2.0], [D / 2.0, E / 2.0, F]])
    # undo the normalizing transform x' = (x - mean)/scale
    S = np.array(
        [
            [1.0 / scale, 0.0, -mean[0] / scale],
            [0.0, 1.0 / scale, -mean[1] / scale],
            [0.0, 0.0, 1.0],
        ]
    )
    return Conic2D.from_matrix(S.T @ Cn @ S)


# ---------------------------------------------------------------------------
# Ellipsoid initialization from a matched ellipse pair
# ---------------------------------------------------------------------------

def _axis_endpoint_vectors(conic: Conic2D) -> tuple[np.ndarray, np.ndarray]:
    """Major and minor axis endpoint pairs of an ellipse, each (2, 2)."""
    c, s = np.cos(conic.angle), np.sin(conic.angle)
    major_dir = np.array([c, s])
    minor_dir = np.array([-s, c])
    A, B = conic.semi_axes
    major = np.stack([conic.center - A * major_dir, conic.center + A * major_dir])
    minor = np.stack([conic.center - B * minor_dir, conic.center + B * minor_dir])
    return major, minor


def _projection_jacobian(intr, pose: Pose, X: np.ndarray) -> np.ndarray:
    """2x3 derivative of the pinhole projection wrt the world point."""
    Xc = pose.transform(X)
    x, y, z = Xc
    J_cam = np.array([[intr.fx / z, 0.0, -intr.fx * x / z**2],
                      [0.0, intr.fy / z, -intr.fy * y / z**2]])
    return J_cam @ pose.rotation


def init_ellipsoid(rig: StereoRig, ell1: Conic2D, ell2: Conic2D) -> Ellipsoid:
    """Triangulate an initial ellipsoid from a matched ellipse pair.

    The center comes from midpoint triangulation of the ellipse centers,
    which also fixes the center distance to each camera. The axis frame
    is spanned by the back-projected major-axis endpoint vectors of both
    views (each placed at its view's center distance) and their cross
    product, mapped to the nearest rotation. If the two major directions
    are nearly parallel in 3D (circular silhouettes make the major
    direction arbitrary), the second view's minor axis is used instead to
    keep the frame well conditioned.

    Axis lengths map the four measured ellipse semi-axes (the feature
    endpoints of both views) back onto the new axis frame: each one is
    the silhouette's support along a world direction transverse to its
    viewing ray, giving a linear system in the squared axis lengths.
    Unlike projecting the skewed endpoint vectors onto the orthonormalized
    frame, this does not shrink the estimate when the two views' major
    directions are far from perpendicular in 3D.
    """
    ray1 = back_project_pinhole(rig.cam1, rig.pose1, ell1.center)
    ray2 = back_project_pinhole(rig.cam2, rig.pose2, ell2.center)
    center, _gap = triangulate_midpoint(ray1, ray2)
    d1 = float(np.linalg.norm(center - ray1.origin))
    d2 = float(np.linalg.norm(center - ray2.origin))

    def lift(px_pair: np.ndarray, intr, pose: Pose, dist: float) -> np.ndarray:
        ends = [back_project_pinhole(intr, pose, p).point_at(dist) for p in px_pair]
        return 0.5 * (ends[1] - ends[0])

    maj1_px, _min1_px = _axis_endpoint_vectors(ell1)
    maj2_px, min2_px = _axis_endpoint_vectors(ell2)
    v1 = lift(maj1_px, rig.cam1, rig.pose1, d1)
    v2_major = lift(maj2_px, rig.cam2, rig.pose2, d2)

    u1 = v1 / np.linalg.norm(v1)
    u2 = v2_major / np.linalg.norm(v2_major)
    if np.linalg.norm(np.cross(u1, u2)) < 0.2:
        v2_minor = lift(min2_px, rig.cam2, rig.pose2, d2)
        u2 = v2_minor / np.linalg.norm(v2_minor)
    w = np.cross(u1, u2)
    R = _nearest_rotation(np.column_stack([u1, u2, w / np.linalg.norm(w)]))

    views = [
        (ell1, _projection_jacobian(rig.cam1, rig.pose1, center)),
        (ell2, _projection_jacobian(rig.cam2, rig.pose2, center)),
    ]
    # each ellipse semi-axis h along image direction u measures the 3D
    # support sqrt(sum_i s_i^2 (r_i . w)^2) along the transverse world
    # direction w with J w ~ u, at scale |J w| px/mm
    rows, rhs = [], []
    for conic, J in views:
        Jpinv = np.linalg.pinv(J)
        ca, sa = np.cos(conic.angle), np.sin(conic.angle)
        for u, h in (((ca, sa), conic.semi_axes[0]), ((-sa, ca), conic.semi_axes[1])):
            w = Jpinv @ np.asarray(u)
            w /= np.linalg.norm(w)
            scale = np.linalg.norm(J @ w)
            rows.append((R.T @ w) ** 2)
            rhs.append((h / scale) ** 2)
    sq, *_ = np.linalg.lstsq(np.asarray(rows), np.asarray(rhs), rcond=None)
    floor = 1e-6 * float(np.max(np.abs(sq)))
    axes = np.sqrt(np.maximum(sq, floor))
    return Ellipsoid(center=center, rotation=R, semi_axes=axes)


# ---------------------------------------------------------------------------
# Single-bubble adjustment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RefineResult:
    ellipsoid: Ellipsoid
    converged: bool
    initial_cost: float
    final_cost: float


_BAD_RESIDUAL = 1e6


def _pack(e: Ellipsoid) -> np.ndarray:
    return np.concatenate([e.center, np.zeros(3), np.log(e.semi_axes)])


def _unpack(p: np.ndarray, R0: np.ndarray) -> Ellipsoid:
    R = Rotation.from_rotvec(p[3:6]).as_matrix() @ R0
    return Ellipsoid(center=p[:3], rotation=_nearest_rotation(R), semi_axes=np.exp(p[6:9]))


def _silhouette_residuals(
    e: Ellipsoid, projections: Sequence[np.ndarray], point_sets: Sequence[np.ndarray]
) -> np.ndarray:
    """Normalized algebraic distances of sampled points to projected outlines."""
    Qs = _dual_quadric(e)
    out = []
    for P, pts in zip(projections, point_sets):
        C = _outline_conic_matrix(P, Qs)
        C = C / max(np.linalg.norm(C), 1e-300)
        r = _conic_sampson(C, pts)
        if not np.all(np.isfinite(r)):
            r = np.full(len(pts), _BAD_RESIDUAL)
        out.append(r)
    return np.concatenate(out)


def refine_ellipsoid(
    rig: StereoRig,
    e0: Ellipsoid,
    contour1: np.ndarray,
    contour2: np.ndarray,
    max_iter: int = 100,
    xtol: float = 1e-10,
    ftol: float = 1e-12,
) -> RefineResult:
    """Refine an ellipsoid against silhouette points in both views.

    Minimizes the summed squared gradient-normalized algebraic distances
    of the contour points to the projected outlines, over 9 parameters
    (center, rotation as a rotation-vector update, log semi-axes).
    The returned cost never exceeds the initial cost; if the optimizer
    fails to converge the best iterate is returned with
    ``converged=False``.
    """
    pts1 = np.asarray(contour1, dtype=float).reshape(-1, 2)
    pts2 = np.asarray(contour2, dtype=float).reshape(-1, 2)
    if len(pts1) < 8 or len(pts2) < 8:
        raise ValueError("need at least 8 contour points per view")
    projections = [
        projection_matrix(rig.cam1, rig.pose1),
        projection_matrix(rig.cam2, rig.pose2),
    ]
    R0 = e0.rotation

    def fun(p: np.ndarray) -> np.ndarray:
        return _silhouette_residuals(_unpack(p, R0), projections, [pts1, pts2])

    p0 = _pack(e0)
    r0 = fun(p0)
    cost0 = float(r0 @ r0)
    res = least_squares(
        fun,
        p0,
        method="trf",
        x_scale="jac",
        xtol=xtol,
        ftol=ftol,
        gtol=1e-14,
        max_nfev=max_iter * (len(p0) + 1),
    )
    cost1 = float(2.0 * res.cost)
    if cost1 > cost0:
        return RefineResult(e0, False, cost0, cost0)
    return RefineResult(_unpack(res.x, R0), bool(res.status > 0), cost0, cost1)


# ---------------------------------------------------------------------------
# Silhouette-based self-calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SelfCalibrationResult:
    rig: StereoRig
    ellipsoids: list[Ellipsoid]
    initial_cost: float
    final_cost: float
    converged: bool


def _translation_basis(t0: np.ndarray) -> np.ndarray:
    """Orthonormal 3x2 basis perpendicular to the baseline direction."""
    t_hat = t0 / np.linalg.norm(t0)
    helper = np.zeros(3)
    helper[np.argmin(np.abs(t_hat))] = 1.0
    u = np.cross(t_hat, helper)
    u /= np.linalg.norm(u)
    w = np.cross(t_hat, u)
    return np.column_stack([u, w])


def self_calibrate(
    rig0: StereoRig,
    observations: Sequence[tuple[np.ndarray, np.ndarray]],
    min_observations: int = 10,
    huber_px: float = 1.0,
    max_iter: int = 100,
) -> SelfCalibrationResult:
    """Refine the relative pose of camera 2 from bubble silhouettes alone.

    ``observations`` are matched contour point pairs (undistorted pixels),
    one pair per bubble; bubbles from different frames can be mixed
    freely. Jointly optimizes all bubble ellipsoids (9 parameters each)
    and the relative orientation plus translation *direction* (5
    parameters) under a Huber loss on the silhouette residuals. The
    baseline length is frozen: it is unobservable from silhouettes of
    unknown-size bubbles.

    Raises :class:`UnderconstrainedError` for fewer than
    ``min_observations`` usable bubbles or if all bubble centers are
    collinear.
    """
    conic_pairs = []
    for pts1, pts2 in observations:
        pts1 = np.asarray(pts1, dtype=float).reshape(-1, 2)
        pts2 = np.asarray(pts2, dtype=float).reshape(-1, 2)
        try:
            conic_pairs.append((fit_ellipse(pts1), fit_ellipse(pts2), pts1, pts2))
        except NotAnEllipseError:
            continue
    if len(conic_pairs) < min_observations:
        raise UnderconstrainedError(
            f"need at least {min_observations} usable bubble observations, "
            f"got {len(conic_pairs)}"
        )

    bubbles0 = [init_ellipsoid(rig0, c1, c2) for c1, c2, _, _ in conic_pairs]
    centers = np.array([e.center for e in bubbles0])
    sv = np.linalg.svd(centers - centers.mean(axis=0), compute_uv=False)
    if sv[1] <= 1e-3 * max(sv[0], 1e-300):
        raise UnderconstrainedError("bubble centers are (near-)collinear")

    K = len(conic_pairs)
    R0 = rig0.pose2.rotation
    t0 = rig0.pose2.translation
    t_norm = np.linalg.norm(t0)
    t_basis = _translation_basis(t0)
    rotations0 = [e.rotation for e in bubbles0]
    P1 = projection_matrix(rig0.cam1, rig0.pose1)

    def pose_from(p: np.ndarray) -> Pose:
        R = Rotation.from_rotvec(p[:3]).as_matrix() @ R0
        t_dir = t0 / t_norm + t_basis @ p[3:5]
        t = t_norm * t_dir / np.linalg.norm(t_dir)
        return Pose(_nearest_rotation(R), t)

    def fun(p: np.ndarray) -> np.ndarray:
        pose2 = pose_from(p)
        P2 = projection_matrix(rig0.cam2, pose2)
        chunks = []
        for k in range(K):
            pk = p[5 + 9 * k : 5 + 9 * (k + 1)]
            e = _unpack(pk, rotations0[k])
            _, _, pts1, pts2 = conic_pairs[k]
            chunks.append(_silhouette_residuals(e, (P1, P2), (pts1, pts2)))
        return np.concatenate(chunks)

    p0 = np.concatenate([np.zeros(5)] + [_pack(e) for e in bubbles0])
    n_res = sum(len(p1) + len(p2) for _, _, p1, p2 in conic_pairs)
    sparsity = lil_matrix((n_res, len(p0)), dtype=np.uint8)
    row = 0
    for k, (_, _, pts1, pts2) in enumerate(conic_pairs):
        nk = len(pts1) + len(pts2)
        sparsity[row : row + nk, :5] = 1
        sparsity[row : row + nk, 5 + 9 * k : 5 + 9 * (k + 1)] = 1
        row += nk

    r0 = fun(p0)
    cost0 = float(r0 @ r0)
    res = least_squares(
        fun,
        p0,
        method="trf",
        loss="huber",
        f_scale=huber_px,
        x_scale="jac",
        jac_sparsity=sparsity,
        xtol=1e-12,
        ftol=1e-14,
        gtol=1e-14,
        # ~15 function evaluations per iteration with grouped sparse
        # finite differences (5 pose columns + 9 shared bubble columns)
        max_nfev=max_iter * 20,
    )
    pose2 = pose_from(res.x)
    rig = rig0.with_pose2(pose2)
    ellipsoids = [
        _unpack(res.x[5 + 9 * k : 5 + 9 * (k + 1)], rotations0[k]) for k in range(K)
    ]
    r1 = fun(res.x)
    return SelfCalibrationResult(
        rig=rig,
        ellipsoids=ellipsoids,
        initial_cost=cost0,
        final_cost=float(r1 @ r1),
        converged=bool(res.status > 0),
    )
