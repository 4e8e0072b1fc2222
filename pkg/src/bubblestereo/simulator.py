"""Synthetic stereo bubble-stream generator with exact ground truth.

Scenes are rendered through the same forward model the pipeline inverts:
ellipsoids are projected to analytic image conics (in undistorted pixel
space), drawn as a dark rim with a brighter interior over a bright
background, mapped through the lens distortion onto the raw pixel grid
with 2x2 supersampling, and written as timestamped PGM sequences with
black synchronization frames, per-camera clock offset/drift and optional
frame drops. The emitted ground truth records every bubble's ellipsoid
and analytic conics per frame, the true stereo pairing, and a ledger of
counting-surface crossings, which makes end-to-end accuracy measurable.

The rim is drawn inward from the silhouette: its outer boundary is the
analytic conic, matching the physical picture of a bubble blocking the
back light along the line of sight.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import Intrinsics, Pose, StereoRig, projection_matrix
from .quadrics import (
    Conic2D,
    DegenerateProjectionError,
    Ellipsoid,
    NotAnEllipsoidError,
    ellipsoid_to_quadric,
    project_quadric,
)
from .imaging import frame_filename, write_pgm

__all__ = [
    "GroundTruth",
    "SceneConfig",
    "generate",
    "make_default_rig",
    "perturb_rig",
]


def make_default_rig(
    width: int = 512,
    height: int = 512,
    px_per_mm: float = 5.7,
    distance_mm: float = 300.0,
    distortion: bool = True,
) -> StereoRig:
    """Synthetic 90-degree rig looking at a rise corridor.

    Camera 1 is the world origin looking along +Z; camera 2 views the
    corridor center from the side (+X direction), at the same distance.
    The focal length realizes ``px_per_mm`` at the corridor center.
    """
    f = px_per_mm * distance_mm
    dist = dict(k1=-0.08, k2=0.05, p1=0.0005, p2=-0.0005) if distortion else {}
    intr = Intrinsics(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0, **dist)
    center2 = np.array([-distance_mm, 0.0, distance_mm])
    R2 = np.array([[0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    return StereoRig(cam1=intr, cam2=intr, pose2=Pose(R2, -R2 @ center2))


def perturb_rig(rig: StereoRig, rot_deg_xyz, t_shift_mm) -> StereoRig:
    """Apply a known extrinsic perturbation, preserving the baseline length."""
    dR = Rotation.from_euler("xyz", np.asarray(rot_deg_xyz, dtype=float), degrees=True)
    R_new = rig.pose2.rotation @ dR.as_matrix()
    t0 = rig.pose2.translation
    t_new = t0 + np.asarray(t_shift_mm, dtype=float)
    t_new = t_new * (np.linalg.norm(t0) / np.linalg.norm(t_new))
    return rig.with_pose2(Pose(R_new, t_new))


@dataclass
class SceneConfig:
    """Parameters of a synthetic bubble-stream recording."""

    rig: StereoRig = field(default_factory=make_default_rig)
    width: int = 512
    height: int = 512
    frame_rate_hz: float = 20.0
    duration_s: float = 5.0

    # bubble population
    bubble_rate_hz: float = 1.5  # regular spawn cadence with jitter
    spawn_jitter: float = 0.1  # fraction of the spawn spacing
    mean_diameter_mm: float = 7.0  # lognormal over equivalent diameter
    sigma_log_diameter: float = 0.08
    aspect_ratio: float = 1.0  # c/a of the (oblate) spheroid, 1 = sphere
    aspect_jitter: float = 0.0
    tilt_max_rad: float = 0.0

    # kinematics (positive rise speed moves bubbles up, i.e. -y)
    rise_speed_cm_s: float = 28.0
    helix_amplitude_mm: float = 1.5
    helix_period_s: float = 0.8
    vertical_wobble_mm: float = 0.0
    vertical_wobble_period_s: float = 0.4

    # corridor cross-section (world mm, centered on the optical axis depth)
    corridor_x: tuple[float, float] = (-25.0, 25.0)
    corridor_z_offset: tuple[float, float] = (-25.0, 25.0)
    spawn_y_mm: float | None = None  # None: just below (above, if falling) the view

    # appearance
    background_intensity: int = 200
    interior_intensity: int = 170
    rim_intensity: int = 20
    rim_width_px: float = 2.0
    noise_sigma: float = 2.0
    nuisance_blobs: int = 0  # static dark blobs baked into the background
    contour_noise_px: float = 0.0  # per-frame jitter of the rendered rims

    # timing
    clock_offset_s: float = 0.0  # camera-2 clock minus camera-1 clock
    clock_drift: float = 0.0  # camera-2 drift, seconds per second
    black_interval: int = 50  # black frame every N triggers
    dropped_frames: list[tuple[int, int]] = field(default_factory=list)

    counting_row: float | None = None  # cam-1 image row for the crossing ledger
    seed: int = 0

    @property
    def n_frames(self) -> int:
        return int(round(self.duration_s * self.frame_rate_hz))

    @property
    def distance_mm(self) -> float:
        # depth of the corridor center in front of camera 1
        return float(self.rig.pose2.camera_center[2])


@dataclass
class _Bubble:
    id: int
    t0: float
    x0: float
    z0: float
    y0: float
    phase: float
    semi_axes: np.ndarray
    rotation: np.ndarray
    rise_mm_s: float

    def center_at(self, t: float, cfg: SceneConfig) -> np.ndarray:
        dt = t - self.t0
        x = self.x0
        z = self.z0
        if cfg.helix_amplitude_mm > 0 and cfg.helix_period_s > 0:
            w = 2.0 * math.pi / cfg.helix_period_s
            x = x + cfg.helix_amplitude_mm * math.cos(w * dt + self.phase)
            z = z + cfg.helix_amplitude_mm * math.sin(w * dt + self.phase)
        y = self.y0 - self.rise_mm_s * dt
        if cfg.vertical_wobble_mm > 0 and cfg.vertical_wobble_period_s > 0:
            w = 2.0 * math.pi / cfg.vertical_wobble_period_s
            y = y + cfg.vertical_wobble_mm * math.sin(w * dt + self.phase)
        return np.array([x, y, z])

    def ellipsoid_at(self, t: float, cfg: SceneConfig) -> Ellipsoid:
        return Ellipsoid(
            center=self.center_at(t, cfg), rotation=self.rotation, semi_axes=self.semi_axes
        )


def _conic_dict(c: Conic2D | None) -> dict | None:
    if c is None:
        return None
    return {
        "u": float(c.center[0]),
        "v": float(c.center[1]),
        "A": float(c.semi_axes[0]),
        "B": float(c.semi_axes[1]),
        "theta": float(c.angle),
    }


@dataclass
class GroundTruth:
    """Everything the generator knows about a rendered scene."""

    width: int
    height: int
    frame_rate_hz: float
    black_interval: int
    counting_row: float | None
    triggers: list[dict]  # per trigger: timestamps, files, black flag, bubbles
    bubbles: list[dict]  # per bubble: spawn time, size, speed
    crossings: list[dict]  # counting-surface ledger
    true_pairs: list[tuple[int, int]]  # (file index cam1, file index cam2)

    @property
    def crossed_volume_mm3(self) -> float:
        return float(sum(c["volume_mm3"] for c in self.crossings))

    def save(self, path: str | Path) -> None:
        doc = {
            "width": self.width,
            "height": self.height,
            "frame_rate_hz": self.frame_rate_hz,
            "black_interval": self.black_interval,
            "counting_row": self.counting_row,
            "triggers": self.triggers,
            "bubbles": self.bubbles,
            "crossings": self.crossings,
            "true_pairs": [list(p) for p in self.true_pairs],
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruth":
        doc = json.loads(Path(path).read_text())
        doc["true_pairs"] = [tuple(p) for p in doc["true_pairs"]]
        return cls(**doc)


def _spawn_bubbles(cfg: SceneConfig, rng: np.random.Generator, y_spawn: float) -> list[_Bubble]:
    bubbles = []
    if cfg.bubble_rate_hz <= 0:
        return bubbles
    spacing = 1.0 / cfg.bubble_rate_hz
    # spawn a little before the scene starts so the stream is in steady state
    t = -abs(y_spawn) / max(abs(cfg.rise_speed_cm_s) * 10.0, 1e-6)
    i = 0
    while t < cfg.duration_s:
        t0 = t + rng.uniform(-cfg.spawn_jitter, cfg.spawn_jitter) * spacing
        d = float(np.exp(rng.normal(np.log(cfg.mean_diameter_mm), cfg.sigma_log_diameter)))
        r = d / 2.0
        aspect = float(
            np.clip(cfg.aspect_ratio + rng.uniform(-1, 1) * cfg.aspect_jitter, 0.3, 1.0)
        )
        # oblate spheroid with the configured volume: a = b, c = aspect * a
        a = r / aspect ** (1.0 / 3.0)
        axes = np.array([a, a, aspect * a])
        # symmetry axis vertical (world y), plus a bounded random tilt
        base = Rotation.from_euler("x", 90, degrees=True).as_matrix()
        if cfg.tilt_max_rad > 0:
            tilt = Rotation.from_rotvec(
                rng.uniform(-cfg.tilt_max_rad, cfg.tilt_max_rad, 3)
            ).as_matrix()
        else:
            tilt = np.eye(3)
        bubbles.append(
            _Bubble(
                id=i,
                t0=t0,
                x0=rng.uniform(*cfg.corridor_x),
                z0=cfg.distance_mm + rng.uniform(*cfg.corridor_z_offset),
                y0=y_spawn,
                phase=rng.uniform(0, 2 * math.pi),
                semi_axes=axes,
                rotation=tilt @ base,
                rise_mm_s=cfg.rise_speed_cm_s * 10.0,
            )
        )
        i += 1
        t += spacing
    return bubbles


def _project_safe(P: np.ndarray, e: Ellipsoid) -> Conic2D | None:
    try:
        return project_quadric(P, ellipsoid_to_quadric(e))
    except (DegenerateProjectionError, NotAnEllipsoidError, np.linalg.LinAlgError):
        return None


def _conic_in_view(c: Conic2D, width: int, height: int, margin: float = 2.0) -> bool:
    r = float(c.semi_axes[0])
    return (
        c.center[0] - r >= margin
        and c.center[0] + r <= width - margin
        and c.center[1] - r >= margin
        and c.center[1] + r <= height - margin
    )


def _undistort_grid(intr: Intrinsics, width: int, height: int) -> np.ndarray:
    """Undistorted pixel coordinates of every raw pixel center, (H, W, 2)."""
    uu, vv = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
    grid = np.stack([uu, vv], axis=-1).reshape(-1, 2)
    return intr.undistort_pixel(grid).reshape(height, width, 2).astype(np.float32)


def _raw_bbox_for_conic(
    intr: Intrinsics, conic: Conic2D, width: int, height: int, pad: float
) -> tuple[int, int, int, int] | None:
    """Conservative raw-image bbox covering a conic given in undistorted space."""
    r = float(conic.semi_axes[0]) + pad
    u0, v0 = conic.center
    corners = np.array(
        [
            [u0 - r, v0 - r], [u0 + r, v0 - r], [u0 - r, v0 + r], [u0 + r, v0 + r],
            [u0 - r, v0], [u0 + r, v0], [u0, v0 - r], [u0, v0 + r],
        ]
    )
    raw = intr.distort_pixel(corners)
    x0 = int(np.floor(raw[:, 0].min() - pad))
    x1 = int(np.ceil(raw[:, 0].max() + pad)) + 1
    y0 = int(np.floor(raw[:, 1].min() - pad))
    y1 = int(np.ceil(raw[:, 1].max() + pad)) + 1
    x0, x1 = max(x0, 0), min(x1, width)
    y0, y1 = max(y0, 0), min(y1, height)
    if x0 >= x1 or y0 >= y1:
        return None
    return x0, x1, y0, y1


_SUBSAMPLES = ((-0.25, -0.25), (-0.25, 0.25), (0.25, -0.25), (0.25, 0.25))


def _render_conic(
    canvas: np.ndarray,
    grid: np.ndarray,
    intr: Intrinsics,
    conic: Conic2D,
    cfg: SceneConfig,
) -> None:
    """Draw one bubble silhouette into the raw-space canvas (darker wins)."""
    bbox = _raw_bbox_for_conic(
        intr, conic, canvas.shape[1], canvas.shape[0], pad=cfg.rim_width_px + 2.0
    )
    if bbox is None:
        return
    x0, x1, y0, y1 = bbox
    sub = grid[y0:y1, x0:x1].astype(np.float64)
    acc = np.zeros(sub.shape[:2])
    for dx, dy in _SUBSAMPLES:
        # distortion varies slowly; offsetting the undistorted coordinates
        # directly is accurate to well under 0.1 px here
        pts = sub + np.array([dx, dy])
        sd = conic.sampson_distance(pts.reshape(-1, 2)).reshape(pts.shape[:2])
        vals = np.full(sd.shape, float(cfg.background_intensity))
        vals[sd < 0.0] = cfg.rim_intensity
        vals[sd <= -cfg.rim_width_px] = cfg.interior_intensity
        acc += vals
    acc /= len(_SUBSAMPLES)
    region = canvas[y0:y1, x0:x1]
    np.minimum(region, acc, out=region)


def _make_background(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    bg = np.full((cfg.height, cfg.width), float(cfg.background_intensity), np.float32)
    for _ in range(cfg.nuisance_blobs):
        cx = rng.uniform(0, cfg.width)
        cy = rng.uniform(0, cfg.height)
        radius = rng.uniform(4, 15)
        depth = rng.uniform(60, 140)
        yy, xx = np.meshgrid(np.arange(cfg.height), np.arange(cfg.width), indexing="ij")
        blob = np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * radius**2)))
        bg -= depth * blob.astype(np.float32)
    return np.clip(bg, 0, 255)


def generate(cfg: SceneConfig, out_dir: str | Path) -> GroundTruth:
    """Render a scene to ``out_dir/cam1`` and ``out_dir/cam2`` plus ground truth.

    Raises ``FileExistsError`` if the output directory exists and is not
    empty. The generator is deterministic for a fixed config and seed.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"output directory {out} is not empty")
    dirs = {1: out / "cam1", 2: out / "cam2"}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    cams = {1: (cfg.rig.cam1, cfg.rig.pose1), 2: (cfg.rig.cam2, cfg.rig.pose2)}
    projections = {k: projection_matrix(*cams[k]) for k in cams}
    grids = {k: _undistort_grid(cams[k][0], cfg.width, cfg.height) for k in cams}
    backgrounds = {k: _make_background(cfg, rng) for k in cams}

    # vertical extent: spawn below the field of view, despawn above it
    fov_half_mm = (cfg.height / 2.0) / cams[1][0].fy * cfg.distance_mm
    edge = fov_half_mm + cfg.mean_diameter_mm * 2.5
    rising = cfg.rise_speed_cm_s >= 0
    y_spawn = cfg.spawn_y_mm if cfg.spawn_y_mm is not None else edge * (1 if rising else -1)
    bubbles = _spawn_bubbles(cfg, rng, y_spawn)
    kill_y = -edge if rising else edge

    dropped = set((int(c), int(t)) for c, t in cfg.dropped_frames)
    interval_us = 1e6 / cfg.frame_rate_hz

    triggers: list[dict] = []
    crossings: list[dict] = []
    true_pairs: list[tuple[int, int]] = []
    save_counter = {1: 0, 2: 0}
    prev_row: dict[int, float] = {}
    crossed: set[int] = set()

    for trig in range(cfg.n_frames):
        t = trig / cfg.frame_rate_hz
        ts = {
            1: int(round(t * 1e6)),
            2: int(round((t + cfg.clock_offset_s + cfg.clock_drift * t) * 1e6)),
        }
        black = cfg.black_interval > 0 and trig % cfg.black_interval == 0

        live = []
        for b in bubbles:
            if t < b.t0:
                continue
            e = b.ellipsoid_at(t, cfg)
            if cfg.rise_speed_cm_s >= 0 and e.center[1] < kill_y:
                continue
            if cfg.rise_speed_cm_s < 0 and e.center[1] > kill_y:
                continue
            conics = {k: _project_safe(projections[k], e) for k in cams}
            live.append((b, e, conics))

        record_bubbles = []
        canvas = {k: backgrounds[k].copy() for k in cams}
        for b, e, conics in live:
            for k in cams:
                conic = conics[k]
                if conic is None:
                    continue
                draw = conic
                if cfg.contour_noise_px > 0:
                    draw = Conic2D.from_parametric(
                        conic.center + rng.normal(scale=cfg.contour_noise_px, size=2),
                        np.maximum(
                            conic.semi_axes
                            + rng.normal(scale=cfg.contour_noise_px, size=2),
                            0.5,
                        ),
                        conic.angle,
                    )
                if not black:
                    _render_conic(canvas[k], grids[k], cams[k][0], draw, cfg)
            q = Rotation.from_matrix(e.rotation).as_quat()  # x, y, z, w
            record_bubbles.append(
                {
                    "id": b.id,
                    "center": [float(v) for v in e.center],
                    "semi_axes": [float(v) for v in e.semi_axes],
                    "q_wxyz": [float(q[3]), float(q[0]), float(q[1]), float(q[2])],
                    "conic1": _conic_dict(conics[1]),
                    "conic2": _conic_dict(conics[2]),
                    "in_view": bool(
                        conics[1] is not None
                        and conics[2] is not None
                        and _conic_in_view(conics[1], cfg.width, cfg.height)
                        and _conic_in_view(conics[2], cfg.width, cfg.height)
                    ),
                }
            )

        # counting-surface ledger on the analytic camera-1 conic centers
        if cfg.counting_row is not None:
            for rec in record_bubbles:
                bid = rec["id"]
                if rec["conic1"] is None:
                    continue
                row = rec["conic1"]["v"]
                if bid in prev_row and bid not in crossed:
                    if prev_row[bid] > cfg.counting_row >= row:
                        crossed.add(bid)
                        r3 = np.prod(rec["semi_axes"])
                        crossings.append(
                            {
                                "bubble_id": bid,
                                "trigger": trig,
                                "volume_mm3": float(4.0 / 3.0 * np.pi * r3),
                                "diameter_mm": float(2.0 * r3 ** (1.0 / 3.0)),
                            }
                        )
                prev_row[bid] = row

        files = {}
        for k in cams:
            if (k, trig) in dropped:
                files[k] = None
                continue
            if black:
                img = np.full((cfg.height, cfg.width), 2, np.uint8)
            else:
                img = canvas[k]
                if cfg.noise_sigma > 0:
                    img = img + rng.normal(0, cfg.noise_sigma, img.shape)
                img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
            idx = save_counter[k]
            write_pgm(dirs[k] / frame_filename(k, idx, ts[k]), img)
            files[k] = idx
            save_counter[k] += 1

        if not black and files[1] is not None and files[2] is not None:
            true_pairs.append((files[1], files[2]))

        triggers.append(
            {
                "trigger": trig,
                "black": bool(black),
                "t1_us": ts[1],
                "t2_us": ts[2],
                "file1": files[1],
                "file2": files[2],
                "bubbles": record_bubbles,
            }
        )

    gt = GroundTruth(
        width=cfg.width,
        height=cfg.height,
        frame_rate_hz=cfg.frame_rate_hz,
        black_interval=cfg.black_interval,
        counting_row=cfg.counting_row,
        triggers=triggers,
        bubbles=[
            {
                "id": b.id,
                "spawn_s": b.t0,
                "diameter_mm": float(2.0 * np.prod(b.semi_axes) ** (1.0 / 3.0)),
                "volume_mm3": float(4.0 / 3.0 * np.pi * np.prod(b.semi_axes)),
                "rise_speed_cm_s": b.rise_mm_s / 10.0,
            }
            for b in bubbles
        ],
        crossings=crossings,
        true_pairs=true_pairs,
    )
    gt.save(out / "ground_truth.json")
    return gt
