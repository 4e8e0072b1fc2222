"""Stereo-photogrammetric quantification of rising gas-bubble streams.

The package turns wide-baseline stereo image sequences of a bubble
stream into per-bubble 3D ellipsoids, trajectories and an aggregate
stream report (counts, size distribution, rise velocities, gas flow
rate). A synthetic scene generator provides ground truth for
end-to-end verification.
"""

from .geometry import Intrinsics, Pose, Ray, StereoRig, load_rig, save_rig
from .quadrics import Conic2D, Ellipsoid, Quadric

__version__ = "0.1.0"

__all__ = [
    "Conic2D",
    "Ellipsoid",
    "Intrinsics",
    "Pose",
    "Quadric",
    "Ray",
    "StereoRig",
    "load_rig",
    "save_rig",
]
