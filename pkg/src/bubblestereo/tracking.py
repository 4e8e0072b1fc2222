"""Temporal association of reconstructed bubbles and reference-surface counting.

Tracking-by-detection in the first camera's image plane: a constant-
velocity Kalman filter per track predicts the next bounding box, the
predicted-vs-detected IoU weights a bipartite graph (solved by the same
assignment machinery as stereo matching), and upward-motion gates cut
edges that would move a bubble downwards or sideways implausibly fast.

Counting happens at a virtual horizontal surface, a fixed image row in
camera 1: each track is counted exactly once, when it first crosses the
row from below, and its size and rise velocity are sampled there. Tracks
that begin above the surface are never counted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .matching import MatchCandidate, solve_assignment
from .quadrics import Ellipsoid

__all__ = [
    "BubbleTracker",
    "CountedBubble",
    "CountingSurface",
    "KalmanBoxFilter",
    "Track",
    "TrackerParams",
    "TrackState",
    "associate",
    "count_at_surface",
    "iou",
]


def iou(bbox1: np.ndarray, bbox2: np.ndarray) -> float:
    """Intersection over union of two (u_min, v_min, u_max, v_max) boxes."""
    b1 = np.asarray(bbox1, dtype=float)
    b2 = np.asarray(bbox2, dtype=float)
    w = min(b1[2], b2[2]) - max(b1[0], b2[0])
    h = min(b1[3], b2[3]) - max(b1[1], b2[1])
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    a1 = (b1[2] - b1[0]) * (b1[3] - b1[1])
    a2 = (b2[2] - b2[0]) * (b2[3] - b2[1])
    return float(inter / (a1 + a2 - inter))


@dataclass
class TrackerParams:
    """SORT-style tracker tunables (noise entries are variances)."""

    iou_min: float = 0.1
    down_slack_px: float = 2.0  # tolerated downward motion per frame
    side_gate_px: float = 25.0  # max sideward motion per frame
    max_age: int = 3  # missed frames before a track is finished
    min_hits: int = 3  # detections required before counting eligibility
    meas_noise_pos: float = 1.0
    meas_noise_area_rel: float = 0.1  # std of area measurement, relative to s
    meas_noise_aspect_rel: float = 0.05
    proc_noise_pos: float = 1.0
    proc_noise_area_rel: float = 1e-2
    proc_noise_vel: float = 1e-1
    proc_noise_area_vel_rel: float = 1e-4
    init_velocity_var: float = 1e3


def _bbox_to_z(bbox: np.ndarray) -> np.ndarray:
    u = 0.5 * (bbox[0] + bbox[2])
    v = 0.5 * (bbox[1] + bbox[3])
    w = bbox[2] - bbox[0]
    h = bbox[3] - bbox[1]
    return np.array([u, v, w * h, w / h])


def _z_to_bbox(z: np.ndarray) -> np.ndarray:
    s = max(z[2], 1e-9)
    r = max(z[3], 1e-9)
    w = np.sqrt(s * r)
    h = s / w
    return np.array([z[0] - w / 2, z[1] - h / 2, z[0] + w / 2, z[1] + h / 2])


class KalmanBoxFilter:
    """Constant-velocity Kalman filter over (u, v, s, r, du, dv, ds).

    ``s`` is the bounding-box area and ``r`` its aspect ratio, which is
    modeled as constant (no process noise and no velocity state).
    """

    def __init__(self, bbox: np.ndarray, params: TrackerParams):
        self.params = params
        self.x = np.zeros(7)
        self.x[:4] = _bbox_to_z(np.asarray(bbox, dtype=float))
        self.F = np.eye(7)
        self.F[0, 4] = self.F[1, 5] = self.F[2, 6] = 1.0
        self.H = np.zeros((4, 7))
        self.H[:4, :4] = np.eye(4)
        p = params
        self.P = np.diag(
            [
                p.meas_noise_pos,
                p.meas_noise_pos,
                (p.meas_noise_area_rel * self.x[2]) ** 2,
                (p.meas_noise_aspect_rel * self.x[3]) ** 2,
                p.init_velocity_var,
                p.init_velocity_var,
                p.init_velocity_var * max(self.x[2], 1.0),
            ]
        )

    def _Q(self) -> np.ndarray:
        p = self.params
        s = max(self.x[2], 1.0)
        return np.diag(
            [
                p.proc_noise_pos,
                p.proc_noise_pos,
                (p.proc_noise_area_rel * s) ** 2,
                0.0,
                p.proc_noise_vel,
                p.proc_noise_vel,
                (p.proc_noise_area_vel_rel * s) ** 2,
            ]
        )

    def _R(self) -> np.ndarray:
        p = self.params
        s = max(self.x[2], 1.0)
        r = max(self.x[3], 1e-3)
        return np.diag(
            [
                p.meas_noise_pos,
                p.meas_noise_pos,
                (p.meas_noise_area_rel * s) ** 2,
                (p.meas_noise_aspect_rel * r) ** 2,
            ]
        )

    def predict(self) -> np.ndarray:
        """Advance one frame; returns the predicted bbox."""
        if self.x[2] + self.x[6] <= 0:
            self.x[6] = 0.0  # do not let area go negative
        self.x = self.F @ self.x
        self.x[2] = max(self.x[2], 1e-9)
        self.P = self.F @ self.P @ self.F.T + self._Q()
        return _z_to_bbox(self.x)

    def update(self, bbox: np.ndarray) -> None:
        z = _bbox_to_z(np.asarray(bbox, dtype=float))
        y = z - self.H @ self.x
        S = self.H @ self.P @ self.H.T + self._R()
        K = self.P @ self.H.T @ np.linalg.inv(S)
        self.x = self.x + K @ y
        self.x[2] = max(self.x[2], 1e-9)
        self.P = (np.eye(7) - K @ self.H) @ self.P

    @property
    def bbox(self) -> np.ndarray:
        return _z_to_bbox(self.x)


@dataclass
class TrackState:
    frame_index: int
    bbox: np.ndarray
    ellipsoid: Ellipsoid


@dataclass
class Track:
    """One bubble trajectory (camera-1 image states plus 3D ellipsoids)."""

    id: int
    states: list[TrackState] = field(default_factory=list)
    hits: int = 0
    time_since_update: int = 0
    status: str = "active"  # active | finished
    kf: KalmanBoxFilter | None = None

    @property
    def last_center(self) -> np.ndarray:
        b = self.states[-1].bbox
        return np.array([0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3])])


def associate(
    predicted_bboxes: list[np.ndarray],
    last_centers: list[np.ndarray],
    frames_since_update: list[int],
    det_bboxes: list[np.ndarray],
    params: TrackerParams,
):
    """IoU-weighted assignment of detections to track predictions.

    Edge gating: IoU below ``iou_min``, downward motion beyond
    ``down_slack_px`` per elapsed frame, or sideward motion beyond
    ``side_gate_px`` per elapsed frame all forbid an edge.
    """
    candidates = []
    for ti, (pb, center, dt) in enumerate(
        zip(predicted_bboxes, last_centers, frames_since_update)
    ):
        dt = max(dt, 1)
        for di, db in enumerate(det_bboxes):
            overlap = iou(pb, db)
            if overlap < params.iou_min:
                continue
            dc = np.array([0.5 * (db[0] + db[2]), 0.5 * (db[1] + db[3])])
            if dc[1] - center[1] > params.down_slack_px * dt:
                continue  # later bubble below the old one
            if abs(dc[0] - center[0]) > params.side_gate_px * dt:
                continue
            candidates.append(MatchCandidate(ti, di, 0.0, 1.0 - overlap))
    return solve_assignment(candidates, len(predicted_bboxes), len(det_bboxes))


class BubbleTracker:
    """Online tracker: feed per-frame (bbox, ellipsoid) observations in order."""

    def __init__(self, params: TrackerParams | None = None):
        self.params = params or TrackerParams()
        self.tracks: list[Track] = []
        self._next_id = 0
        self._last_frame: int | None = None

    @property
    def active_tracks(self) -> list[Track]:
        return [t for t in self.tracks if t.status == "active"]

    def update(
        self, frame_index: int, observations: list[tuple[np.ndarray, Ellipsoid]]
    ) -> list[tuple[int, int]]:
        """Advance to ``frame_index``; returns (track id, observation index) pairs.

        Frame indices may skip values (synchronization frames, drops);
        predictions advance once per elapsed frame.
        """
        if self._last_frame is None:
            advance = 1
        else:
            advance = max(int(frame_index) - self._last_frame, 1)
        self._last_frame = int(frame_index)

        active = self.active_tracks
        predicted = []
        for t in active:
            for _ in range(advance):
                pb = t.kf.predict()
            predicted.append(pb)
        det_bboxes = [np.asarray(b, dtype=float) for b, _ in observations]
        assignment = associate(
            predicted,
            [t.last_center for t in active],
            [t.time_since_update + advance for t in active],
            det_bboxes,
            self.params,
        )

        out = []
        for ti, di in assignment.pairs:
            track = active[ti]
            bbox, ellipsoid = det_bboxes[di], observations[di][1]
            track.kf.update(bbox)
            track.states.append(TrackState(frame_index, bbox.copy(), ellipsoid))
            track.hits += 1
            track.time_since_update = 0
            out.append((track.id, di))

        for ti in assignment.unmatched1:
            track = active[ti]
            track.time_since_update += advance
            if track.time_since_update > self.params.max_age:
                track.status = "finished"

        for di in assignment.unmatched2:
            bbox, ellipsoid = det_bboxes[di], observations[di][1]
            track = Track(id=self._next_id, kf=KalmanBoxFilter(bbox, self.params))
            self._next_id += 1
            track.states.append(TrackState(frame_index, bbox.copy(), ellipsoid))
            track.hits = 1
            self.tracks.append(track)
            out.append((track.id, di))
        return out

    def finish_all(self) -> None:
        for t in self.tracks:
            t.status = "finished"


@dataclass(frozen=True)
class CountingSurface:
    """Virtual horizontal counting plane: an image row in camera 1."""

    row: float

    def __post_init__(self) -> None:
        if self.row <= 0:
            raise ValueError("counting row must be positive")


@dataclass(frozen=True)
class CountedBubble:
    """One bubble, counted once at its first upward surface crossing."""

    track_id: int
    crossing_time_s: float
    equivalent_diameter_mm: float
    volume_mm3: float
    rise_velocity_cm_s: float


def count_at_surface(
    tracks: list[Track],
    surface: CountingSurface,
    frame_rate_hz: float,
    min_hits: int = 3,
    velocity_half_window: int = 5,
    up: np.ndarray = (0.0, -1.0, 0.0),
) -> list[CountedBubble]:
    """Count each track once at its first upward crossing of the surface.

    A track is counted only if it starts below the surface (larger image
    row), has at least ``min_hits`` states, and its camera-1 center row
    decreases through the surface row. Size and volume are sampled from
    the refined ellipsoid of the state nearest the crossing; the rise
    velocity is the vertical 3D displacement over a window of
    ``velocity_half_window`` frames around the crossing divided by the
    elapsed time. ``up`` is the world-frame ascent direction (the default
    is image-up in camera 1).
    """
    up = np.asarray(up, dtype=float)
    up = up / np.linalg.norm(up)
    counted = []
    for track in tracks:
        if len(track.states) < min_hits or track.hits < min_hits:
            continue
        states = track.states
        rows = np.array([0.5 * (s.bbox[1] + s.bbox[3]) for s in states])
        if rows[0] <= surface.row:
            continue  # spawned above the counting surface
        cross = None
        for k in range(1, len(states)):
            if rows[k] <= surface.row < rows[k - 1]:
                cross = k
                break
        if cross is None:
            continue
        f0, f1 = states[cross - 1].frame_index, states[cross].frame_index
        frac = (rows[cross - 1] - surface.row) / (rows[cross - 1] - rows[cross])
        f_star = f0 + frac * (f1 - f0)
        crossing_time = f_star / frame_rate_hz

        nearest = cross if abs(f1 - f_star) <= abs(f_star - f0) else cross - 1
        ellipsoid = states[nearest].ellipsoid

        frames = np.array([s.frame_index for s in states], dtype=float)
        in_window = np.abs(frames - f_star) <= velocity_half_window
        idx = np.flatnonzero(in_window)
        if len(idx) < 2:
            idx = np.array([cross - 1, cross])
        first, last = idx[0], idx[-1]
        dt = (frames[last] - frames[first]) / frame_rate_hz
        rise_mm = float(
            (states[last].ellipsoid.center - states[first].ellipsoid.center) @ up
        )
        velocity_cm_s = rise_mm / dt / 10.0 if dt > 0 else 0.0

        counted.append(
            CountedBubble(
                track_id=track.id,
                crossing_time_s=float(crossing_time),
                equivalent_diameter_mm=float(ellipsoid.equivalent_diameter),
                volume_mm3=float(ellipsoid.volume),
                rise_velocity_cm_s=velocity_cm_s,
            )
        )
    return counted
