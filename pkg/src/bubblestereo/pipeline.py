"""End-to-end orchestration: from PGM sequences to a stream report.

Stage order: synchronize -> per-camera background learning + removal +
detection -> (optional silhouette self-calibration on the leading pairs,
after which reconstruction uses the refined rig) -> stereo matching ->
ellipsoid init/refinement -> tracking -> counting -> aggregation.
Detection happens in undistorted pixel space and depends only on the
intrinsics, so recalibrating the relative pose never invalidates the
cached detections.

Everything is deterministic for fixed inputs and config; the optional
detection worker pool maps frames in order, so its degree does not
change any result.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import StereoRig, load_rig, save_rig
from .imaging import (
    BackgroundStream,
    BubbleDetection,
    DetectionParams,
    FrameInfo,
    SyncResult,
    build_undistort_maps,
    detect_bubbles,
    remove_background,
    scan_sequence,
    synchronize,
)
from .matching import build_candidates, solve_assignment
from .quadrics import (
    DegenerateProjectionError,
    NotAnEllipsoidError,
    UnderconstrainedError,
    init_ellipsoid,
    refine_ellipsoid,
    sample_conic_points,
    self_calibrate,
)
from .tracking import (
    BubbleTracker,
    CountedBubble,
    CountingSurface,
    TrackerParams,
    count_at_surface,
)

logger = logging.getLogger(__name__)

__all__ = [
    "PipelineConfig",
    "PipelineError",
    "StreamReport",
    "aggregate",
    "measure_pair",
    "run",
]


class PipelineError(RuntimeError):
    """A stage failure, annotated with the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    """Full configuration of one analysis run."""

    input_dir1: str
    input_dir2: str
    calibration: str
    counting_row: float
    output_dir: str | None = None
    frame_rate_hz: float | None = None  # None: inferred from timestamps
    background_window: int = 301
    background_stride: int = 1
    detection: DetectionParams = field(default_factory=DetectionParams)
    gate_px: float = 5.0
    area_weight: float = 0.0
    tracker: TrackerParams = field(default_factory=TrackerParams)
    refine_source: str = "ellipse"  # "ellipse": sampled fit; "contour": raw pixels
    contour_samples: int = 64
    self_calibrate: bool = False
    selfcal_pairs: int = 500
    selfcal_max_bubbles: int = 80
    selfcal_gate_px: float = 10.0
    min_hits: int = 3
    velocity_half_window: int = 5
    workers: int = 1
    dump_detections: bool = False
    dump_tracks: bool = False
    dump_assignments: bool = False

    def to_json(self) -> str:
        doc = asdict(self)
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PipelineConfig":
        doc = json.loads(text)
        det = doc.pop("detection", None)
        trk = doc.pop("tracker", None)
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
        cfg = cls(**doc)
        if det:
            cfg.detection = DetectionParams(**det)
        if trk:
            cfg.tracker = TrackerParams(**trk)
        return cfg


def _histogram(values: np.ndarray, bin_width: float) -> dict:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return {"bin_width": bin_width, "edges": [], "counts": []}
    lo = np.floor(values.min() / bin_width) * bin_width
    hi = np.ceil(values.max() / bin_width) * bin_width
    if hi <= lo:
        hi = lo + bin_width
    edges = np.arange(lo, hi + 0.5 * bin_width, bin_width)
    counts, _ = np.histogram(values, bins=edges)
    return {
        "bin_width": bin_width,
        "edges": [float(e) for e in edges],
        "counts": [int(c) for c in counts],
    }


@dataclass
class StreamReport:
    """Aggregated characterization of one bubble-stream recording."""

    duration_s: float
    count: int
    total_volume_ml: float
    flow_rate_ml_s: float
    diameter_mean_mm: float
    diameter_std_mm: float
    velocity_mean_cm_s: float
    diameter_hist: dict
    volume_hist: dict
    velocity_hist: dict
    bubbles: list[dict]
    merged_contour_frames: list[int] = field(default_factory=list)
    frame_drops: list[dict] = field(default_factory=list)
    sequence: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "sequence": self.sequence,
            "duration_s": self.duration_s,
            "count": self.count,
            "total_volume_ml": self.total_volume_ml,
            "flow_rate_ml_s": self.flow_rate_ml_s,
            "diameter_mm": {"mean": self.diameter_mean_mm, "std": self.diameter_std_mm},
            "velocity_cm_s": {"mean": self.velocity_mean_cm_s},
            "histograms": {
                "diameter_mm": self.diameter_hist,
                "volume_ml": self.volume_hist,
                "velocity_cm_s": self.velocity_hist,
            },
            "bubbles": self.bubbles,
            "merged_contour_frames": self.merged_contour_frames,
            "frame_drops": self.frame_drops,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def aggregate(
    counted: list[CountedBubble],
    duration_s: float,
    diameter_bin_mm: float = 0.25,
    velocity_bin_cm_s: float = 1.0,
    volume_bin_ml: float = 0.025,
) -> StreamReport:
    """Totals, means and histograms over the counted bubbles.

    Volumes are reported in ml (1 ml = 1000 mm^3); the diameter and
    volume histograms share the bubbles but use independent bin edges.
    """
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    diameters = np.array([c.equivalent_diameter_mm for c in counted])
    volumes_ml = np.array([c.volume_mm3 for c in counted]) / 1000.0
    velocities = np.array([c.rise_velocity_cm_s for c in counted])
    total_volume = float(volumes_ml.sum())
    return StreamReport(
        duration_s=float(duration_s),
        count=len(counted),
        total_volume_ml=total_volume,
        flow_rate_ml_s=total_volume / duration_s,
        diameter_mean_mm=float(diameters.mean()) if len(counted) else 0.0,
        diameter_std_mm=float(diameters.std()) if len(counted) else 0.0,
        velocity_mean_cm_s=float(velocities.mean()) if len(counted) else 0.0,
        diameter_hist=_histogram(diameters, diameter_bin_mm),
        volume_hist=_histogram(volumes_ml, volume_bin_ml),
        velocity_hist=_histogram(velocities, velocity_bin_cm_s),
        bubbles=[
            {
                "track_id": c.track_id,
                "crossing_time_s": c.crossing_time_s,
                "diameter_mm": c.equivalent_diameter_mm,
                "volume_mm3": c.volume_mm3,
                "velocity_cm_s": c.rise_velocity_cm_s,
            }
            for c in counted
        ],
    )


# ---------------------------------------------------------------------------
# Stage helpers
# ---------------------------------------------------------------------------

def _detect_task(args) -> list[BubbleDetection]:
    foreground, params, pos, camera_id = args
    return detect_bubbles(foreground, params, frame_index=pos, camera_id=camera_id)


def _detect_camera_stream(
    infos: list[FrameInfo],
    positions: list[int],
    intr,
    shape: tuple[int, int],
    config: PipelineConfig,
    camera_id: int,
) -> dict[int, list[BubbleDetection]]:
    """Background learning + removal + detection over one camera's paired frames.

    ``positions`` are indices into ``infos`` in capture order; the result
    maps pair sequence position -> detections.
    """
    window = min(config.background_window, 2 * (len(positions) // 2) + 1)
    umap = build_undistort_maps(intr, shape)
    stream = BackgroundStream(shape, max(window, 5), stride=config.background_stride)
    pending: dict[int, np.ndarray] = {}
    results: dict[int, list[BubbleDetection]] = {}

    tasks = []

    def flush(buffer):
        if not buffer:
            return
        if config.workers > 1:
            with ProcessPoolExecutor(max_workers=config.workers) as pool:
                for (pos, _), dets in zip(
                    buffer, pool.map(_detect_task, buffer, chunksize=4)
                ):
                    results[pos] = dets
        else:
            for task in buffer:
                results[task[2]] = _detect_task(task)
        buffer.clear()

    buffer = []
    emitted = []

    def handle(seq_pos: int, background: np.ndarray):
        raw = pending.pop(seq_pos)
        fg = remove_background(raw, background, umap)
        buffer.append((fg, config.detection, seq_pos, camera_id))
        if len(buffer) >= 32:
            flush(buffer)

    for seq_pos, frame_pos in enumerate(positions):
        raw = infos[frame_pos].load().pixels
        pending[seq_pos] = raw
        for ready_pos, bg in stream.feed(raw):
            handle(ready_pos, bg)
    for ready_pos, bg in stream.finish():
        handle(ready_pos, bg)
    flush(buffer)
    del emitted, tasks
    return results


@dataclass
class PairReconstruction:
    """Stereo-matched, refined bubbles of one synchronized pair."""

    pair_pos: int
    tick: int
    observations: list  # (bbox1, ellipsoid) for the tracker
    matches: list[tuple[int, int]]
    merged: bool


def measure_pair(
    rig: StereoRig,
    dets1: list[BubbleDetection],
    dets2: list[BubbleDetection],
    gate_px: float = 5.0,
    area_weight: float = 0.0,
    refine_source: str = "ellipse",
    contour_samples: int = 64,
):
    """Match one detection pair, reconstruct and refine all bubbles.

    Returns (observations, matches) where observations are
    (bbox-in-camera-1, refined ellipsoid) tuples aligned with matches.
    This is the measurement core of the pipeline, usable standalone.
    """
    candidates = build_candidates(rig, dets1, dets2, gate_px, area_weight)
    assignment = solve_assignment(candidates, len(dets1), len(dets2))
    observations = []
    matches = []
    for i, j in assignment.pairs:
        d1, d2 = dets1[i], dets2[j]
        try:
            e0 = init_ellipsoid(rig, d1.ellipse, d2.ellipse)
            if refine_source == "contour":
                pts1, pts2 = d1.contour, d2.contour
            else:
                pts1 = sample_conic_points(d1.ellipse, contour_samples)
                pts2 = sample_conic_points(d2.ellipse, contour_samples)
            refined = refine_ellipsoid(rig, e0, pts1, pts2)
        except (
            DegenerateProjectionError,
            NotAnEllipsoidError,
            ValueError,
            np.linalg.LinAlgError,
        ):
            continue
        observations.append((d1.bbox, refined.ellipsoid))
        matches.append((i, j))
    return observations, matches


def _selfcalibrate_stage(
    rig: StereoRig,
    detections: dict[int, tuple[list[BubbleDetection], list[BubbleDetection]]],
    config: PipelineConfig,
) -> StereoRig:
    observations = []
    for pos in sorted(detections):
        if pos >= config.selfcal_pairs:
            break
        dets1, dets2 = detections[pos]
        candidates = build_candidates(
            rig, dets1, dets2, config.selfcal_gate_px, config.area_weight
        )
        assignment = solve_assignment(candidates, len(dets1), len(dets2))
        for i, j in assignment.pairs:
            pts1 = sample_conic_points(dets1[i].ellipse, config.contour_samples)
            pts2 = sample_conic_points(dets2[j].ellipse, config.contour_samples)
            observations.append((pts1, pts2))
    if len(observations) > config.selfcal_max_bubbles:
        sel = np.linspace(0, len(observations) - 1, config.selfcal_max_bubbles)
        observations = [observations[int(k)] for k in sel]
    logger.info("self-calibration on %d bubble observations", len(observations))
    result = self_calibrate(rig, observations)
    logger.info(
        "self-calibration cost %.3g -> %.3g", result.initial_cost, result.final_cost
    )
    return result.rig


# ---------------------------------------------------------------------------
# Main entry
# ---------------------------------------------------------------------------

def run(config: PipelineConfig) -> StreamReport:
    """Execute the full pipeline; returns (and optionally writes) the report."""
    for d in (config.input_dir1, config.input_dir2):
        if not Path(d).is_dir():
            raise PipelineError("config", f"input directory missing: {d}")
    if not Path(config.calibration).is_file():
        raise PipelineError("config", f"calibration file missing: {config.calibration}")
    rig = load_rig(config.calibration)

    infos1 = scan_sequence(config.input_dir1)
    infos2 = scan_sequence(config.input_dir2)
    if not infos1 or not infos2:
        raise PipelineError("ingest", "empty input sequence")
    shape = infos1[0].load().pixels.shape

    logger.info("synchronizing %d + %d frames", len(infos1), len(infos2))
    sync = synchronize(infos1, infos2)  # may raise UnsynchronizableError
    if not sync.pairs:
        raise PipelineError("synchronize", "no frame pairs survived synchronization")
    frame_rate = config.frame_rate_hz or 1e6 / sync.frame_interval_us

    positions1 = [p1 for p1, _ in sync.pairs]
    positions2 = [p2 for _, p2 in sync.pairs]
    t_first = infos1[positions1[0]].timestamp_us
    t_last = infos1[positions1[-1]].timestamp_us
    ticks = [
        int(round((infos1[p].timestamp_us - t_first) / sync.frame_interval_us))
        for p in positions1
    ]

    logger.info("detection over %d pairs", len(sync.pairs))
    try:
        dets_cam1 = _detect_camera_stream(
            infos1, positions1, rig.cam1, shape, config, camera_id=1
        )
        dets_cam2 = _detect_camera_stream(
            infos2, positions2, rig.cam2, shape, config, camera_id=2
        )
    except Exception as err:  # re-raise with stage context
        raise PipelineError("detect", str(err)) from err
    detections = {
        pos: (dets_cam1.get(pos, []), dets_cam2.get(pos, []))
        for pos in range(len(sync.pairs))
    }

    recalibrated = False
    if config.self_calibrate:
        try:
            rig = _selfcalibrate_stage(rig, detections, config)
            recalibrated = True
        except UnderconstrainedError as err:
            logger.warning("self-calibration skipped: %s", err)

    logger.info("reconstruction and tracking")
    tracker = BubbleTracker(config.tracker)
    merged_frames = []
    assignments_dump = []
    for pos in range(len(sync.pairs)):
        dets1, dets2 = detections[pos]
        try:
            observations, matches = measure_pair(
                rig,
                dets1,
                dets2,
                config.gate_px,
                config.area_weight,
                config.refine_source,
                config.contour_samples,
            )
        except Exception as err:
            raise PipelineError("reconstruct", f"pair {pos}: {err}") from err
        if any(d.merged for d in dets1) or any(d.merged for d in dets2):
            merged_frames.append(pos)
        tracker.update(ticks[pos], observations)
        if config.dump_assignments:
            assignments_dump.append({"frame_index": pos, "pairs": matches})
    tracker.finish_all()

    surface = CountingSurface(row=config.counting_row)
    counted = count_at_surface(
        tracker.tracks,
        surface,
        frame_rate,
        min_hits=config.min_hits,
        velocity_half_window=config.velocity_half_window,
    )
    duration_s = (t_last - t_first) / 1e6
    if duration_s <= 0:
        duration_s = len(sync.pairs) / frame_rate

    report = aggregate(counted, duration_s)
    report.merged_contour_frames = merged_frames
    report.frame_drops = [
        {
            "camera_id": d.camera_id,
            "after_index": d.after_index,
            "missing_trigger_index": d.missing_trigger_index,
            "n_dropped": d.n_dropped,
        }
        for d in sync.drops
    ]
    report.sequence = {
        "start_us": int(t_first),
        "end_us": int(t_last),
        "n_pairs": len(sync.pairs),
        "frame_rate_hz": frame_rate,
        "clock_offset_us": sync.offset_us,
        "recalibrated": recalibrated,
    }

    if config.output_dir is not None:
        _write_outputs(config, report, rig, recalibrated, detections, tracker, assignments_dump)
    return report


def _write_outputs(config, report, rig, recalibrated, detections, tracker, assignments_dump):
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")

    with open(out / "bubbles.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["track_id", "crossing_time_s", "diameter_mm", "volume_mm3", "velocity_cm_s"]
        )
        for b in report.bubbles:
            writer.writerow(
                [
                    b["track_id"],
                    f"{b['crossing_time_s']:.6f}",
                    f"{b['diameter_mm']:.6f}",
                    f"{b['volume_mm3']:.6f}",
                    f"{b['velocity_cm_s']:.6f}",
                ]
            )

    for name, hist in (
        ("diameter_hist.csv", report.diameter_hist),
        ("volume_hist.csv", report.volume_hist),
        ("velocity_hist.csv", report.velocity_hist),
    ):
        with open(out / name, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["bin_left", "bin_right", "count"])
            edges, counts = hist["edges"], hist["counts"]
            for k in range(len(counts)):
                writer.writerow([edges[k], edges[k + 1], counts[k]])

    with open(out / "counted.jsonl", "w") as f:
        for b in report.bubbles:
            f.write(json.dumps(b) + "\n")

    if recalibrated:
        save_rig(rig, out / "recalibrated_rig.json", recalibrated=True)

    if config.dump_detections:
        with open(out / "detections.jsonl", "w") as f:
            for pos in sorted(detections):
                for dets in detections[pos]:
                    for d in dets:
                        f.write(
                            json.dumps(
                                {
                                    "frame_index": pos,
                                    "camera_id": d.camera_id,
                                    "ellipse": {
                                        "u": float(d.center[0]),
                                        "v": float(d.center[1]),
                                        "A": float(d.ellipse.semi_axes[0]),
                                        "B": float(d.ellipse.semi_axes[1]),
                                        "theta": float(d.ellipse.angle),
                                    },
                                    "bbox": [float(v) for v in d.bbox],
                                    "contour_len": d.contour_len,
                                    "merged": d.merged,
                                }
                            )
                            + "\n"
                        )

    if config.dump_tracks:
        with open(out / "tracks.jsonl", "w") as f:
            for t in tracker.tracks:
                f.write(
                    json.dumps(
                        {
                            "id": t.id,
                            "hits": t.hits,
                            "states": [
                                {
                                    "frame_index": s.frame_index,
                                    "bbox": [float(v) for v in s.bbox],
                                    "center_mm": [float(v) for v in s.ellipsoid.center],
                                    "diameter_mm": s.ellipsoid.equivalent_diameter,
                                }
                                for s in t.states
                            ],
                        }
                    )
                    + "\n"
                )

    if config.dump_assignments:
        with open(out / "assignments.jsonl", "w") as f:
            for rec in assignments_dump:
                f.write(json.dumps(rec) + "\n")
