import numpy as np
import pytest

from bubblestereo.geometry import Intrinsics, Pose, StereoRig

# Published lab calibration used as a realistic distortion test vector
LEFT_INTRINSICS = Intrinsics(
    fx=1723.189, fy=1737.865, cx=584.490, cy=362.619,
    k1=-0.1087, k2=0.1184, p1=-0.0031, p2=-0.0021,
)
RIGHT_INTRINSICS = Intrinsics(
    fx=1711.854, fy=1719.751, cx=507.474, cy=349.812,
    k1=-0.0716, k2=0.0106, p1=-0.0136, p2=-0.0128,
)


def make_rig(width=512, height=512, f=1710.0, distance=300.0) -> StereoRig:
    """Distortion-free 90-degree rig; camera 2 views the corridor from +X."""
    intr = Intrinsics(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0)
    center2 = np.array([-distance, 0.0, distance])
    R2 = np.array([[0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    return StereoRig(cam1=intr, cam2=intr, pose2=Pose(R2, -R2 @ center2))


@pytest.fixture
def rig() -> StereoRig:
    return make_rig()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(202406)
