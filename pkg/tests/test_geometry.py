import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from bubblestereo.geometry import (
    BehindCameraError,
    DegenerateTriangulationError,
    Intrinsics,
    Pose,
    Ray,
    StereoRig,
    back_project,
    epipolar_distance,
    epipolar_distances,
    epipolar_line,
    epipole_in_cam2,
    load_rig,
    project,
    save_rig,
    triangulate_midpoint,
)
from bubblestereo.simulator import perturb_rig

from conftest import LEFT_INTRINSICS, RIGHT_INTRINSICS, make_rig


def closest_points_oracle(o1, d1, o2, d2):
    """Independent closest-point solver: explicit 2x2 normal equations."""
    o1, d1, o2, d2 = (np.asarray(v, dtype=float) for v in (o1, d1, o2, d2))
    d1 = d1 / np.linalg.norm(d1)
    d2 = d2 / np.linalg.norm(d2)
    A = np.array([[d1 @ d1, -d1 @ d2], [d1 @ d2, -d2 @ d2]])
    b = np.array([d1 @ (o2 - o1), d2 @ (o2 - o1)])
    s, t = np.linalg.solve(A, b)
    p1 = o1 + s * d1
    p2 = o2 + t * d2
    return 0.5 * (p1 + p2), np.linalg.norm(p1 - p2)


class TestProjection:
    def test_principal_point_identity(self):
        intr = Intrinsics(fx=1000.0, fy=1100.0, cx=320.0, cy=240.0)
        for depth in (50.0, 100.0, 400.0):
            px = project(intr, Pose.identity(), np.array([0.0, 0.0, depth]))
            np.testing.assert_allclose(px, [320.0, 240.0], atol=1e-12)

    def test_lab_left_camera_on_axis(self):
        # published left-camera intrinsics, distortion off: on-axis point
        # lands on the principal point
        intr = Intrinsics(fx=1723.189, fy=1737.865, cx=584.490, cy=362.619)
        px = project(intr, Pose.identity(), np.array([0.0, 0.0, 100.0]))
        np.testing.assert_allclose(px, [584.490, 362.619], atol=1e-12)

    def test_hand_computed_offset(self):
        intr = Intrinsics(fx=1723.189, fy=1737.865, cx=584.490, cy=362.619)
        px = project(intr, Pose.identity(), np.array([10.0, 0.0, 1000.0]))
        # u = cx + fx * X / Z, computed by hand
        assert px[0] == pytest.approx(584.490 + 17.23189, abs=1e-9)
        assert px[1] == pytest.approx(362.619, abs=1e-9)

    def test_behind_camera_raises(self):
        intr = Intrinsics(fx=1000.0, fy=1000.0, cx=320.0, cy=240.0)
        with pytest.raises(BehindCameraError):
            project(intr, Pose.identity(), np.array([0.0, 0.0, -5.0]))
        with pytest.raises(BehindCameraError):
            project(intr, Pose.identity(), np.array([1.0, 1.0, 0.0]))


class TestBackProjection:
    def test_principal_point_gives_optical_axis(self):
        ray = back_project(LEFT_INTRINSICS, Pose.identity(), np.array([584.490, 362.619]))
        np.testing.assert_allclose(ray.direction, [0.0, 0.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(ray.origin, 0.0, atol=1e-12)

    def test_roundtrip_100_random_pixels(self, rng):
        for intr in (LEFT_INTRINSICS, RIGHT_INTRINSICS):
            px = np.column_stack(
                [rng.uniform(50, 1000, 100), rng.uniform(50, 750, 100)]
            )
            for p in px:
                ray = back_project(intr, Pose.identity(), p)
                for depth in (50.0, 200.0, 500.0):
                    back = project(intr, Pose.identity(), ray.point_at(depth))
                    assert np.abs(back - p).max() < 1e-6

    def test_undistort_fixed_point_roundtrip(self, rng):
        xn = np.column_stack([rng.uniform(-0.25, 0.25, 200), rng.uniform(-0.2, 0.2, 200)])
        xd = LEFT_INTRINSICS.distort(xn)
        back = LEFT_INTRINSICS.undistort(xd)
        # 1e-6 px at fx ~ 1723 is ~6e-10 in normalized units
        assert np.abs(back - xn).max() * LEFT_INTRINSICS.fx < 1e-6

    def test_posed_camera_roundtrip(self, rng):
        pose = Pose(
            Rotation.from_euler("xyz", [10, -20, 5], degrees=True).as_matrix(),
            np.array([30.0, -40.0, 100.0]),
        )
        for _ in range(20):
            p = np.array([rng.uniform(100, 900), rng.uniform(100, 700)])
            ray = back_project(LEFT_INTRINSICS, pose, p)
            back = project(LEFT_INTRINSICS, pose, ray.point_at(rng.uniform(50, 400)))
            assert np.abs(back - p).max() < 1e-6


class TestTriangulation:
    def test_exactly_intersecting_rays(self):
        r1 = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]))
        r2 = Ray(np.array([100.0, 0.0, 100.0]), np.array([-1.0, 0.0, 0.0]))
        X, gap = triangulate_midpoint(r1, r2)
        # the -x ray through (100, 0, 100) meets the +z axis at (0, 0, 100)
        oracle_X, oracle_gap = closest_points_oracle(
            r1.origin, r1.direction, r2.origin, r2.direction
        )
        np.testing.assert_allclose(X, oracle_X, atol=1e-12)
        np.testing.assert_allclose(X, [0.0, 0.0, 100.0], atol=1e-12)
        assert gap == pytest.approx(oracle_gap, abs=1e-12) == pytest.approx(0.0, abs=1e-12)

    def test_skew_rays_match_oracle(self, rng):
        for _ in range(50):
            o1 = rng.uniform(-100, 100, 3)
            o2 = rng.uniform(-100, 100, 3)
            d1 = rng.normal(size=3)
            d2 = rng.normal(size=3)
            if np.linalg.norm(np.cross(d1, d2)) < 1e-3:
                continue
            X, gap = triangulate_midpoint(Ray(o1, d1), Ray(o2, d2))
            oX, ogap = closest_points_oracle(o1, d1, o2, d2)
            np.testing.assert_allclose(X, oX, atol=1e-8)
            assert gap == pytest.approx(ogap, abs=1e-8)

    def test_parallel_rays_raise(self):
        r1 = Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]))
        r2 = Ray(np.array([10.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]))
        with pytest.raises(DegenerateTriangulationError):
            triangulate_midpoint(r1, r2)

    def test_triangulation_exactness_through_rig(self, rig, rng):
        for _ in range(30):
            X = np.array(
                [rng.uniform(-30, 30), rng.uniform(-40, 40), 300 + rng.uniform(-30, 30)]
            )
            x1 = project(rig.cam1, rig.pose1, X)
            x2 = project(rig.cam2, rig.pose2, X)
            r1 = back_project(rig.cam1, rig.pose1, x1)
            r2 = back_project(rig.cam2, rig.pose2, x2)
            Xt, gap = triangulate_midpoint(r1, r2)
            assert np.linalg.norm(Xt - X) < 1e-6
            assert gap < 1e-6


class TestEpipolar:
    def test_epipole_on_every_line(self, rig, rng):
        e2 = epipole_in_cam2(rig)
        e2h = np.array([e2[0], e2[1], 1.0])
        for _ in range(25):
            x1 = np.array([rng.uniform(0, 512), rng.uniform(0, 512)])
            line = epipolar_line(rig, x1)
            assert abs(line @ e2h) < 1e-9

    def test_forward_projection_on_line(self, rig, rng):
        for _ in range(25):
            X = np.array(
                [rng.uniform(-30, 30), rng.uniform(-40, 40), 300 + rng.uniform(-30, 30)]
            )
            x1 = project(rig.cam1, rig.pose1, X)
            x2 = project(rig.cam2, rig.pose2, X)
            line = epipolar_line(rig, x1)
            assert abs(line @ np.array([x2[0], x2[1], 1.0])) < 1e-6
            assert epipolar_distance(rig, x1, x2) < 1e-9

    def test_small_rotation_creates_pixel_scale_errors(self, rig, rng):
        # a ~0.6 degree extrinsic error must push epipolar residuals into
        # the several-pixel regime, mirroring the recalibration tables
        bad = perturb_rig(rig, [0.596, -0.557, 0.708], [0.0, 0.0, 0.0])
        X = np.column_stack(
            [rng.uniform(-30, 30, 50), rng.uniform(-40, 40, 50), 300 + rng.uniform(-30, 30, 50)]
        )
        x1 = np.array([project(rig.cam1, rig.pose1, p) for p in X])
        x2 = np.array([project(rig.cam2, rig.pose2, p) for p in X])
        mean_err = epipolar_distances(bad, x1, x2).mean()
        assert mean_err > 3.0

    def test_unrelated_points_positive(self, rig, rng):
        for _ in range(20):
            x1 = rng.uniform(0, 512, 2)
            x2 = rng.uniform(0, 512, 2)
            assert epipolar_distance(rig, x1, x2) >= 0.0
        # generic points are not on each other's epipolar lines
        vals = [
            epipolar_distance(rig, rng.uniform(0, 512, 2), rng.uniform(0, 512, 2))
            for _ in range(20)
        ]
        assert np.median(vals) > 1.0

    def test_line_normalization(self, rig):
        line = epipolar_line(rig, np.array([100.0, 200.0]))
        assert np.hypot(line[0], line[1]) == pytest.approx(1.0, abs=1e-12)


class TestDistortionInjectivity:
    def test_monotone_near_center(self):
        # grid over |r| < 0.2 in normalized coordinates with the published
        # coefficients stays injective (no fold-over)
        for intr in (LEFT_INTRINSICS, RIGHT_INTRINSICS):
            g = np.linspace(-0.2, 0.2, 41)
            xx, yy = np.meshgrid(g, g)
            pts = np.stack([xx, yy], axis=-1).reshape(-1, 2)
            r = np.hypot(pts[:, 0], pts[:, 1])
            pts = pts[r < 0.2]
            mapped = intr.distort(pts)
            # injectivity via minimal pairwise distance preservation
            d_in = np.linalg.norm(pts[None] - pts[:, None], axis=-1)
            d_out = np.linalg.norm(mapped[None] - mapped[:, None], axis=-1)
            mask = ~np.eye(len(pts), dtype=bool)
            assert d_out[mask].min() > 0.1 * d_in[mask].min()


class TestTypesAndIO:
    def test_pose_validation(self):
        with pytest.raises(ValueError):
            Pose(np.eye(3) * 1.1, np.zeros(3))
        R_reflect = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError):
            Pose(R_reflect, np.zeros(3))

    def test_intrinsics_validation(self):
        with pytest.raises(ValueError):
            Intrinsics(fx=-1.0, fy=1.0, cx=0.0, cy=0.0)

    def test_ray_normalization(self):
        r = Ray(np.zeros(3), np.array([0.0, 0.0, 10.0]))
        assert np.linalg.norm(r.direction) == pytest.approx(1.0, abs=1e-12)

    def test_rig_requires_identity_pose1(self):
        pose = Pose(np.eye(3), np.array([1.0, 0.0, 0.0]))
        with pytest.raises(ValueError):
            StereoRig(cam1=LEFT_INTRINSICS, cam2=RIGHT_INTRINSICS, pose2=pose, pose1=pose)

    def test_rig_requires_baseline(self):
        with pytest.raises(ValueError):
            StereoRig(cam1=LEFT_INTRINSICS, cam2=RIGHT_INTRINSICS, pose2=Pose.identity())

    def test_calibration_file_roundtrip(self, tmp_path):
        # quaternion/translation mirror the published rig transform
        pose2 = Pose.from_quaternion(
            [0.694, -0.020, 0.718, 0.033], [-287.11, -17.11, 303.88]
        )
        rig = StereoRig(cam1=LEFT_INTRINSICS, cam2=RIGHT_INTRINSICS, pose2=pose2)
        path = tmp_path / "rig.json"
        save_rig(rig, path)
        doc = json.loads(path.read_text())
        for key in ("fx", "fy", "cx", "cy", "k1", "k2", "p1", "p2"):
            assert key in doc["cam1"] and key in doc["cam2"]
        assert len(doc["pose2"]["q"]) == 4 and len(doc["pose2"]["t"]) == 3
        assert doc["recalibrated"] is False

        back = load_rig(path)
        np.testing.assert_allclose(back.pose2.rotation, rig.pose2.rotation, atol=1e-9)
        np.testing.assert_allclose(back.pose2.translation, rig.pose2.translation, atol=1e-9)
        assert back.cam1.fx == rig.cam1.fx
        assert back.cam2.k2 == rig.cam2.k2

        save_rig(rig, path, recalibrated=True)
        assert json.loads(path.read_text())["recalibrated"] is True

    def test_roundtrip_grid_invariant(self, rng):
        # projection/back-projection round trip over image-bound pixels
        # and depths in the working range
        intr = LEFT_INTRINSICS
        us = np.linspace(60, 960, 7)
        vs = np.linspace(60, 700, 7)
        for u in us:
            for v in vs:
                ray = back_project(intr, Pose.identity(), np.array([u, v]))
                for d in (50.0, 160.0, 300.0, 500.0):
                    px = project(intr, Pose.identity(), ray.point_at(d))
                    assert np.abs(px - [u, v]).max() < 1e-6
