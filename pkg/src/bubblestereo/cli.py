"""Command-line interface.

Subcommands:

* ``simulate``    render a synthetic stereo scene from a scene config
* ``run``         execute the full analysis pipeline from a pipeline config
* ``recalibrate`` refine the stereo extrinsics from bubble silhouettes
* ``report``      rebuild a stream report from a counted-bubble dump

Exit codes: 0 success, 2 configuration error, 3 unsynchronizable input,
4 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .geometry import load_rig, save_rig
from .imaging import UnsynchronizableError, scan_sequence, synchronize
from .pipeline import PipelineConfig, PipelineError
from .quadrics import UnderconstrainedError, self_calibrate
from .simulator import SceneConfig, generate, make_default_rig
from .tracking import CountedBubble

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_UNSYNCHRONIZABLE = 3
EXIT_STAGE = 4


def _load_scene_config(path: str) -> SceneConfig:
    doc = json.loads(Path(path).read_text())
    rig_path = doc.pop("calibration", None)
    if rig_path is not None:
        rig = load_rig(rig_path)
    else:
        rig = make_default_rig(
            width=doc.get("width", 512),
            height=doc.get("height", 512),
        )
    doc["dropped_frames"] = [tuple(x) for x in doc.get("dropped_frames", [])]
    known = set(SceneConfig.__dataclass_fields__) - {"rig"}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
    return SceneConfig(rig=rig, **doc)


def _cmd_simulate(args) -> int:
    try:
        cfg = _load_scene_config(args.config)
    except (OSError, ValueError, KeyError, TypeError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        gt = generate(cfg, args.out)
        save_rig(cfg.rig, Path(args.out) / "rig.json")
    except FileExistsError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:
        print(f"simulation failed: {err}", file=sys.stderr)
        return EXIT_STAGE
    print(
        f"scene written to {args.out}: {len(gt.true_pairs)} stereo pairs, "
        f"{len(gt.bubbles)} bubbles, {len(gt.crossings)} surface crossings"
    )
    return EXIT_OK


def _cmd_run(args) -> int:
    try:
        config = PipelineConfig.from_json(Path(args.config).read_text())
    except (OSError, ValueError, TypeError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = pipeline.run(config)
    except UnsynchronizableError as err:
        print(f"unsynchronizable input: {err}", file=sys.stderr)
        return EXIT_UNSYNCHRONIZABLE
    except PipelineError as err:
        if err.stage == "config":
            print(f"configuration error: {err}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"pipeline failed: {err}", file=sys.stderr)
        return EXIT_STAGE
    print(
        f"{report.count} bubbles, {report.total_volume_ml:.3f} ml total, "
        f"{report.flow_rate_ml_s:.4f} ml/s, "
        f"d = {report.diameter_mean_mm:.2f} +- {report.diameter_std_mm:.2f} mm, "
        f"v = {report.velocity_mean_cm_s:.2f} cm/s"
    )
    return EXIT_OK


def _cmd_recalibrate(args) -> int:
    for path in (args.input1, args.input2, args.calibration):
        if not Path(path).exists():
            print(f"configuration error: missing path {path}", file=sys.stderr)
            return EXIT_CONFIG
    rig = load_rig(args.calibration)
    config = PipelineConfig(
        input_dir1=args.input1,
        input_dir2=args.input2,
        calibration=args.calibration,
        counting_row=1.0,  # unused in this command
        background_window=args.window,
        selfcal_pairs=args.pairs,
        selfcal_max_bubbles=args.max_bubbles,
        selfcal_gate_px=args.gate,
    )
    try:
        infos1 = scan_sequence(args.input1)
        infos2 = scan_sequence(args.input2)
        if not infos1 or not infos2:
            print("configuration error: empty input sequence", file=sys.stderr)
            return EXIT_CONFIG
        sync = synchronize(infos1, infos2)
        shape = infos1[0].load().pixels.shape
        positions1 = [p for p, _ in sync.pairs][: config.selfcal_pairs]
        positions2 = [p for _, p in sync.pairs][: config.selfcal_pairs]
        dets1 = pipeline._detect_camera_stream(
            infos1, positions1, rig.cam1, shape, config, camera_id=1
        )
        dets2 = pipeline._detect_camera_stream(
            infos2, positions2, rig.cam2, shape, config, camera_id=2
        )
        detections = {
            pos: (dets1.get(pos, []), dets2.get(pos, []))
            for pos in range(len(positions1))
        }
        refined = pipeline._selfcalibrate_stage(rig, detections, config)
    except UnsynchronizableError as err:
        print(f"unsynchronizable input: {err}", file=sys.stderr)
        return EXIT_UNSYNCHRONIZABLE
    except UnderconstrainedError as err:
        print(f"recalibration failed: {err}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as err:
        print(f"recalibration failed: {err}", file=sys.stderr)
        return EXIT_STAGE
    save_rig(refined, args.out, recalibrated=True)
    print(f"refined rig written to {args.out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    try:
        lines = Path(args.counted).read_text().splitlines()
        counted = []
        for line in lines:
            if not line.strip():
                continue
            doc = json.loads(line)
            counted.append(
                CountedBubble(
                    track_id=int(doc["track_id"]),
                    crossing_time_s=float(doc["crossing_time_s"]),
                    equivalent_diameter_mm=float(doc["diameter_mm"]),
                    volume_mm3=float(doc["volume_mm3"]),
                    rise_velocity_cm_s=float(doc["velocity_cm_s"]),
                )
            )
    except (OSError, ValueError, KeyError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = pipeline.aggregate(counted, args.duration)
    except ValueError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "report.json").write_text(report.to_json() + "\n")
        print(f"report written to {args.out}/report.json")
    else:
        print(report.to_json())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bubblestereo",
        description="Stereo-photogrammetric bubble stream quantification",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="info logging")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("simulate", help="render a synthetic stereo bubble scene")
    p.add_argument("--config", required=True, help="scene config JSON")
    p.add_argument("--out", required=True, help="output directory (must be empty)")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("run", help="run the full analysis pipeline")
    p.add_argument("--config", required=True, help="pipeline config JSON")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("recalibrate", help="refine stereo extrinsics from silhouettes")
    p.add_argument("--input1", required=True, help="camera 1 PGM directory")
    p.add_argument("--input2", required=True, help="camera 2 PGM directory")
    p.add_argument("--calibration", required=True, help="rig calibration JSON")
    p.add_argument("--out", required=True, help="output path for the refined rig")
    p.add_argument("--pairs", type=int, default=500, help="synchronized pairs to scan")
    p.add_argument("--max-bubbles", type=int, default=80)
    p.add_argument("--gate", type=float, default=10.0, help="epipolar gate in px")
    p.add_argument("--window", type=int, default=301, help="background window")
    p.set_defaults(func=_cmd_recalibrate)

    p = sub.add_parser("report", help="aggregate a counted-bubble dump")
    p.add_argument("--counted", required=True, help="counted.jsonl from a run")
    p.add_argument("--duration", type=float, required=True, help="duration in s")
    p.add_argument("--out", default=None, help="output directory (default: stdout)")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
