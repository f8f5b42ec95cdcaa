"""Command-line interface for the simulation pipeline.

Subcommands:
    simulate    run the full pipeline from a config file
    calibrate   batch extrinsic refinement from a keypoint file
    score-grid  dump per-cell sampler scores for one frame
    depth       per-camera depth-calibration report for one frame
    fixture     generate a synthetic test dataset
    serve       start the interactive calibration HTTP service

Exit codes: 0 success, 2 config error, 3 data error, 4 internal error.
The ROADSIM_LOG environment variable sets the log level (DEBUG, INFO,
WARNING, ERROR); default WARNING.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from . import pipeline
from .config import load_config
from .errors import ConfigError, RoadSimError, UnknownStage
from .fixtures import FixtureConfig, generate_fixture

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4

log = logging.getLogger(__name__)


def parse_frames_arg(text: str):
    """Accept "a,b,c" or an inclusive zero-padded range "000010..000012"."""
    text = text.strip()
    if ".." in text:
        start, end = text.split("..", 1)
        try:
            a, b = int(start), int(end)
        except ValueError:
            raise ConfigError(f"bad frame range {text!r}; expected START..END")
        if b < a:
            raise ConfigError(f"empty frame range {text!r}")
        return [str(i).zfill(len(start)) for i in range(a, b + 1)]
    ids = [t.strip() for t in text.split(",") if t.strip()]
    if not ids:
        raise ConfigError("frame list is empty")
    return ids


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _load_run_config(args) -> "pipeline.PipelineConfig":
    cfg = load_config(args.config)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        if args.workers < 1:
            raise ConfigError("workers must be >= 1")
        overrides["workers"] = args.workers
    if getattr(args, "frames", None) is not None:
        overrides["frames"] = parse_frames_arg(args.frames)
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def cmd_simulate(args) -> int:
    cfg = _load_run_config(args)
    if args.dry_run:
        frame_ids = list(cfg.frames) if cfg.frames else pipeline.discover_frames(cfg.scene_root)
        meshes, catalog = pipeline.load_assets(cfg) if cfg.stages.sample else ({}, [])
        kp_path = cfg.keypoints_path()
        _emit(
            {
                "dry_run": True,
                "scene_root": cfg.scene_root,
                "output_root": cfg.output_root,
                "seed": cfg.seed,
                "workers": cfg.workers,
                "frames": frame_ids,
                "stages": dataclasses.asdict(cfg.stages),
                "assets": sorted(meshes),
                "keypoints": str(kp_path) if kp_path else None,
                "post_chain": [s.name for s in cfg.post_chain],
            }
        )
        return EXIT_OK
    run = pipeline.run_pipeline(cfg)
    _emit(run.to_dict())
    if run.ok:
        return EXIT_OK
    for f in run.failed:
        print(
            f"frame {f.frame_id} failed at stage {f.failed_stage}: {f.error}",
            file=sys.stderr,
        )
    internal = any(f.error_kind == "internal" for f in run.failed)
    return EXIT_INTERNAL if internal else EXIT_DATA


def cmd_calibrate(args) -> int:
    summary = pipeline.calibrate_batch(args.scene, args.keypoints, args.output)
    _emit({"scene_root": args.scene, "output_root": args.output, "frames": summary})
    return EXIT_OK


def cmd_score_grid(args) -> int:
    cfg = _load_run_config(args)
    cells = pipeline.grid_cell_scores(cfg, args.frame)
    _emit({"frame_id": args.frame, "cells": cells})
    return EXIT_OK


def cmd_depth(args) -> int:
    cfg = _load_run_config(args)
    _emit(pipeline.depth_summary(cfg, args.frame))
    return EXIT_OK


def cmd_fixture(args) -> int:
    try:
        config = FixtureConfig(
            n_cameras=args.cameras,
            n_boxes=args.boxes,
            n_frames=args.frames,
            width=args.width,
            height=args.height,
            keypoint_noise_px=args.keypoint_noise,
            extrinsic_rot_deg=args.perturb_rot,
            extrinsic_trans_m=args.perturb_trans,
        )
    except RoadSimError as exc:
        raise ConfigError(str(exc))
    summary = generate_fixture(config, seed=args.seed, out_root=args.output)
    _emit(summary)
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.scene)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roadsim",
        description="Roadside scene simulation pipeline",
        epilog="Set ROADSIM_LOG=DEBUG|INFO|WARNING|ERROR to control logging.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the pipeline from a config file")
    sim.add_argument("--config", required=True, help="YAML or JSON run configuration")
    sim.add_argument("--seed", type=int, default=None, help="override the config seed")
    sim.add_argument("--workers", type=int, default=None, help="override the worker count")
    sim.add_argument(
        "--frames", default=None, help="frame subset: comma list or START..END range"
    )
    sim.add_argument(
        "--dry-run", action="store_true", help="validate config and print the plan, write nothing"
    )
    sim.set_defaults(func=cmd_simulate)

    cal = sub.add_parser("calibrate", help="batch extrinsic refinement from keypoints")
    cal.add_argument("--scene", required=True, help="dataset root")
    cal.add_argument("--keypoints", required=True, help="keypoint annotation file")
    cal.add_argument("--output", required=True, help="where refined calib files go")
    cal.set_defaults(func=cmd_calibrate)

    grid = sub.add_parser("score-grid", help="dump placement cell scores for a frame")
    grid.add_argument("--config", required=True)
    grid.add_argument("--frame", required=True)
    grid.set_defaults(func=cmd_score_grid)

    dep = sub.add_parser("depth", help="depth-calibration report for a frame")
    dep.add_argument("--config", required=True)
    dep.add_argument("--frame", required=True)
    dep.set_defaults(func=cmd_depth)

    fix = sub.add_parser("fixture", help="generate a synthetic dataset")
    fix.add_argument("--output", required=True, help="directory to create the dataset in")
    fix.add_argument("--seed", type=int, default=0)
    fix.add_argument("--cameras", type=int, default=2)
    fix.add_argument("--boxes", type=int, default=3)
    fix.add_argument("--frames", type=int, default=1)
    fix.add_argument("--width", type=int, default=640)
    fix.add_argument("--height", type=int, default=480)
    fix.add_argument("--keypoint-noise", type=float, default=0.0, help="pixel sigma")
    fix.add_argument("--perturb-rot", type=float, default=0.0, help="degrees")
    fix.add_argument("--perturb-trans", type=float, default=0.0, help="meters")
    fix.set_defaults(func=cmd_fixture)

    srv = sub.add_parser("serve", help="start the calibration HTTP service")
    srv.add_argument("--scene", required=True, help="dataset root to serve")
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--port", type=int, default=8000)
    srv.set_defaults(func=cmd_serve)

    return parser


def _setup_logging() -> None:
    name = os.environ.get("ROADSIM_LOG", "WARNING").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UnknownStage) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RoadSimError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except KeyboardInterrupt:
        raise
    except Exception as exc:  # noqa: BLE001 - the CLI boundary maps everything to an exit code
        log.exception("internal error")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
