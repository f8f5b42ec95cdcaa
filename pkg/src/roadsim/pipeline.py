"""Frame-level orchestration: calibrate, depth, sample, composite, post, export.

`run_pipeline` drives a whole dataset from one `PipelineConfig`. Each
frame flows through the enabled stages independently and lands either
under `<output_root>/frames/<id>` or, on failure, under
`<output_root>/failed/<id>` together with an `error.json` naming the
stage that broke. Good and failed output never mix: every frame is
staged in a scratch directory and published with a single rename.

Randomness discipline: the run seed and the frame id (via CRC-32)
derive one `SeedSequence` per frame, so a frame's placements depend
only on (seed, frame_id, grid, sampler, count) and never on which
other frames run, the worker count, or unrelated config fields.

The run report collects, per frame, the placement counts, the
rejection-reason histogram, the per-camera depth fit (a, b, rms) and
the stage timings. Timings are wall-clock and therefore vary between
runs; the dataset tree under `frames/` is byte-identical for identical
config and seed.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import GridSettings, PipelineConfig
from .depth import calibrate as fit_depth
from .depth import foreground_depth, select_foreground, union_mask
from .errors import (
    DegenerateFit,
    InsufficientKeypoints,
    InvariantViolation,
    MissingFile,
    ParseError,
    RoadSimError,
)
from .extrinsics import Keypoint, KeypointSet, optimize
from .geometry import project
from .placement import AssetSpec, Placement, Source, PlacementGrid, sample_placements, score_cells
from .postfx import ChainContext, apply_chain
from .render import AssetMesh, RenderConfig, load_obj, render_scene
from .scene_io import (
    CameraFrame,
    SceneFrame,
    load_manifest,
    load_scene,
    project_pointcloud,
    save_calib,
    save_scene,
)

log = logging.getLogger(__name__)

STAGING_DIR = ".staging"


@dataclass
class FrameReport:
    """Everything the run report records about one frame."""

    frame_id: str
    status: str = "ok"  # "ok" | "failed"
    failed_stage: Optional[str] = None
    error: Optional[str] = None
    error_kind: Optional[str] = None  # "data" | "internal"
    requested: int = 0
    accepted: int = 0
    rejections: Dict[str, int] = field(default_factory=dict)
    shortfall: Optional[str] = None
    calibration: Dict[str, dict] = field(default_factory=dict)
    depth: Dict[str, dict] = field(default_factory=dict)
    render_errors: Dict[str, str] = field(default_factory=dict)
    timings_ms: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunReport:
    seed: int
    frames: List[FrameReport]

    @property
    def ok(self) -> bool:
        return all(f.status == "ok" for f in self.frames)

    @property
    def failed(self) -> List[FrameReport]:
        return [f for f in self.frames if f.status != "ok"]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "n_frames": len(self.frames),
            "n_failed": len(self.failed),
            "ok": self.ok,
            "frames": [f.to_dict() for f in self.frames],
        }


def frame_seed_sequence(seed: int, frame_id: str) -> np.random.SeedSequence:
    """Per-frame random stream root: (run seed, CRC-32 of the frame id)."""
    return np.random.SeedSequence([int(seed), zlib.crc32(frame_id.encode("utf-8"))])


def discover_frames(scene_root) -> List[str]:
    frames_dir = Path(scene_root) / "frames"
    if not frames_dir.is_dir():
        raise MissingFile(f"no frames directory under {scene_root}")
    ids = sorted(p.name for p in frames_dir.iterdir() if p.is_dir())
    if not ids:
        raise MissingFile(f"{frames_dir} contains no frame directories")
    return ids


def load_keypoint_file(path) -> Dict[str, Dict[str, list]]:
    """Read corner annotations: frames -> cameras -> entries.

    Each entry carries box_index, corner_index and the observed (u, v).
    Structure is validated here; box indices are range-checked against
    the frame's labels at use time.
    """
    p = Path(path)
    if not p.is_file():
        raise MissingFile(str(p))
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(p, f"bad JSON: {exc.msg}", line=exc.lineno)
    frames = data.get("frames") if isinstance(data, dict) else None
    if not isinstance(frames, dict):
        raise ParseError(p, "expected a top-level 'frames' mapping")
    for fid, cams in frames.items():
        if not isinstance(cams, dict):
            raise ParseError(p, f"frame {fid!r}: expected a mapping of cameras")
        for cid, entries in cams.items():
            if not isinstance(entries, list):
                raise ParseError(p, f"frame {fid!r} camera {cid!r}: expected a list of entries")
            for i, e in enumerate(entries):
                if not isinstance(e, dict) or not {"box_index", "corner_index", "u", "v"} <= set(e):
                    raise ParseError(
                        p,
                        f"frame {fid!r} camera {cid!r} entry {i}: "
                        "need box_index, corner_index, u, v",
                    )
    return frames


def load_assets(cfg: PipelineConfig) -> Tuple[Dict[str, AssetMesh], List[AssetSpec]]:
    """Meshes for the compositor plus sampler specs, in stable id order.

    Relative mesh paths resolve against the manifest's directory.
    """
    manifest_path = cfg.manifest_path()
    manifest = load_manifest(manifest_path)
    base = Path(manifest_path).parent
    meshes: Dict[str, AssetMesh] = {}
    specs: List[AssetSpec] = []
    for asset_id in sorted(manifest.entries):
        entry = manifest[asset_id]
        mesh_path = Path(entry.mesh_path)
        if not mesh_path.is_absolute():
            mesh_path = base / mesh_path
        meshes[asset_id] = load_obj(mesh_path, asset_id, entry.dims, entry.color)
        specs.append(AssetSpec(asset_id=asset_id, dims=tuple(entry.dims), class_id=entry.class_id))
    return meshes, specs


def build_grid(settings: GridSettings, labels) -> PlacementGrid:
    """Instantiate the candidate grid; in "labels" mode, seed points come
    from the frame's own boxes and out-of-extent ones are dropped."""
    origin = np.asarray(settings.origin, dtype=float)
    if settings.seed_points == "labels":
        seeds = np.array([b.center[:2] for b in labels], dtype=float).reshape(-1, 2)
        hi = origin + np.array([settings.nx, settings.ny]) * settings.cell_size
        inside = np.all((seeds >= origin) & (seeds <= hi), axis=1)
        if len(seeds) and not inside.all():
            log.info("dropped %d seed labels outside the grid extent", int((~inside).sum()))
        seeds = seeds[inside]
    else:
        seeds = np.asarray(list(settings.seed_points), dtype=float).reshape(-1, 2)
    return PlacementGrid(
        origin, settings.cell_size, settings.nx, settings.ny, settings.ground_z, seeds
    )


def refine_extrinsics(frame: SceneFrame, frame_keypoints: Dict[str, list], report: FrameReport) -> SceneFrame:
    """Optimize each annotated camera; cameras without enough keypoints
    keep their original pose, with the reason recorded in the report."""
    new_cams = []
    for cam in frame.cameras:
        raw = frame_keypoints.get(cam.camera_id)
        if not raw:
            new_cams.append(cam)
            continue
        entries = []
        for e in raw:
            bi = int(e["box_index"])
            if not 0 <= bi < len(frame.labels):
                raise InvariantViolation(
                    f"camera {cam.camera_id}: keypoint references box {bi} "
                    f"but the frame has {len(frame.labels)} labels"
                )
            entries.append(Keypoint(frame.labels[bi], int(e["corner_index"]), (e["u"], e["v"])))
        kset = KeypointSet(tuple(entries), camera_id=cam.camera_id)
        try:
            result = optimize(cam.extrinsics, cam.intrinsics, kset)
        except InsufficientKeypoints as exc:
            report.calibration[cam.camera_id] = {"error": str(exc)}
            new_cams.append(cam)
            continue
        report.calibration[cam.camera_id] = {
            "initial_rmse": result.initial_rmse,
            "final_rmse": result.final_rmse,
            "iterations": result.iterations,
            "converged": result.converged,
        }
        new_cams.append(
            CameraFrame(
                cam.camera_id,
                cam.image_path,
                cam.image,
                cam.intrinsics,
                result.optimized,
                cam.relative_depth,
                cam.masks,
            )
        )
    return SceneFrame(frame.frame_id, new_cams, frame.labels, frame.cloud)


def depth_stage(frame: SceneFrame, report: FrameReport) -> Dict[str, "object"]:
    """Fit the affine depth model per camera and build occlusion rasters.

    The fit prefers foreground pixels (instance masks tied to labeled
    boxes); a degenerate foreground fit falls back to all LiDAR-valid
    pixels, noted in the report. Cameras without usable data are
    skipped, never fatal: simulated objects simply render unoccluded
    there.
    """
    occlusions: Dict[str, object] = {}
    for cam in frame.cameras:
        cid = cam.camera_id
        if cam.relative_depth is None:
            report.depth[cid] = {"error": "no relative depth raster"}
            continue
        sparse = project_pointcloud(frame.cloud, cam.extrinsics, cam.intrinsics)
        fg = None
        if cam.masks is not None:
            centers = []
            for box in frame.labels:
                px = project(box.center, cam.extrinsics, cam.intrinsics)
                if px is not None:
                    centers.append((px.u, px.v))
            selected = select_foreground(
                cam.masks, centers, (cam.intrinsics.height, cam.intrinsics.width)
            )
            fg = union_mask(selected)
        entry: dict = {}
        calib = None
        if fg is not None and fg.any():
            try:
                calib = fit_depth(cam.relative_depth, sparse, fg)
                entry["restricted"] = True
            except DegenerateFit as exc:
                entry["fallback"] = f"foreground fit degenerate ({exc}); fit on all valid pixels"
        if calib is None:
            entry["restricted"] = False
            try:
                calib = fit_depth(cam.relative_depth, sparse)
            except DegenerateFit as exc:
                report.depth[cid] = {"error": str(exc)}
                continue
        entry.update(
            {"a": calib.a, "b": calib.b, "rms": calib.rms_error, "inliers": calib.inlier_count}
        )
        report.depth[cid] = entry
        if fg is not None and fg.any():
            occlusions[cid] = foreground_depth(cam.relative_depth, calib, fg)
    return occlusions


def _sample_stage(
    cfg: PipelineConfig,
    frame: SceneFrame,
    catalog: List[AssetSpec],
    report: FrameReport,
) -> List[Placement]:
    seq = frame_seed_sequence(cfg.seed, frame.frame_id)
    count_seq, sampler_seq = seq.spawn(2)
    requested = cfg.count.draw(np.random.default_rng(count_seq))
    report.requested = requested
    if requested == 0:
        return []
    grid = build_grid(cfg.grid, frame.labels)
    existing = [Placement(box=b, asset_id="", source=Source.REAL) for b in frame.labels]
    stats: Dict[str, int] = {}
    placements = sample_placements(
        grid,
        frame.rig,
        existing,
        requested,
        catalog,
        int(sampler_seq.generate_state(1, np.uint64)[0]),
        cfg.sampler,
        stats,
    )
    report.accepted = len(placements)
    report.rejections = stats
    if len(placements) < requested:
        scores = score_cells(grid, frame.rig, existing + placements, cfg.sampler)
        eligible = sum(1 for s in scores if np.isfinite(s.total))
        report.shortfall = (
            "no eligible cells (seed-point gate)" if eligible == 0 else "candidate retries exhausted"
        )
    return placements


def _quarantine(output_root: Path, frame_id: str, staging: Path, report: FrameReport) -> None:
    """Move anything staged for a failed frame under failed/<id> and drop
    an error.json next to it. Best effort: quarantine must not mask the
    original failure."""
    try:
        qdir = output_root / "failed" / frame_id
        if qdir.exists():
            shutil.rmtree(qdir)
        qdir.mkdir(parents=True, exist_ok=True)
        staged = staging / "frames" / frame_id
        if staged.is_dir():
            for child in sorted(staged.iterdir()):
                shutil.move(str(child), str(qdir / child.name))
        payload = {
            "frame_id": frame_id,
            "stage": report.failed_stage,
            "error": report.error,
        }
        (qdir / "error.json").write_text(
            json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    except OSError:
        log.exception("quarantine of frame %s failed", frame_id)


def process_frame(
    cfg: PipelineConfig,
    frame_id: str,
    keypoints: Optional[Dict[str, list]],
    meshes: Dict[str, AssetMesh],
    catalog: List[AssetSpec],
) -> FrameReport:
    """Run one frame through the enabled stages; never raises.

    Failures mark the report with the stage that broke and move any
    partial output to quarantine.
    """
    report = FrameReport(frame_id=frame_id)
    output_root = Path(cfg.output_root)
    staging = output_root / STAGING_DIR / frame_id
    stage = "load"

    def tick(name, t0):
        report.timings_ms[name] = round((time.perf_counter() - t0) * 1e3, 3)

    try:
        t0 = time.perf_counter()
        frame = load_scene(cfg.scene_root, frame_id)
        tick("load", t0)

        stage = "calibrate"
        t0 = time.perf_counter()
        if cfg.stages.calibrate and keypoints:
            frame = refine_extrinsics(frame, keypoints, report)
        tick("calibrate", t0)

        stage = "depth"
        t0 = time.perf_counter()
        occlusions = depth_stage(frame, report) if cfg.stages.depth else {}
        tick("depth", t0)

        stage = "sample"
        t0 = time.perf_counter()
        placements = _sample_stage(cfg, frame, catalog, report) if cfg.stages.sample else []
        tick("sample", t0)

        stage = "composite"
        t0 = time.perf_counter()
        export_images: Dict[str, np.ndarray] = {}
        coverages: Dict[str, np.ndarray] = {}
        out_labels: list = list(frame.labels) + [p.box for p in placements]
        if cfg.stages.composite:
            result = render_scene(
                frame, placements, meshes, frame.rig, occlusions or None, RenderConfig()
            )
            report.render_errors = dict(result.errors)
            out_labels = result.labels
            for cid, comp in result.composites.items():
                export_images[cid] = comp.image
                coverages[cid] = comp.coverage
        tick("composite", t0)

        stage = "post"
        t0 = time.perf_counter()
        if cfg.stages.post and cfg.post_chain:
            for cam in frame.cameras:
                cid = cam.camera_id
                ctx = ChainContext(
                    placements=tuple(placements),
                    coverage=coverages.get(cid),
                    extr=cam.extrinsics,
                    intr=cam.intrinsics,
                )
                base = export_images.get(cid, cam.image)
                export_images[cid] = apply_chain(base, cfg.post_chain, ctx)
        tick("post", t0)

        stage = "export"
        t0 = time.perf_counter()
        save_scene(frame, staging, composites=export_images or None, labels=out_labels)
        src = staging / "frames" / frame_id
        dst = output_root / "frames" / frame_id
        dst.parent.mkdir(parents=True, exist_ok=True)
        if dst.exists():
            shutil.rmtree(dst)
        os.replace(src, dst)
        tick("export", t0)
        return report
    except Exception as exc:  # noqa: BLE001 - a frame failure must not kill the pool
        report.status = "failed"
        report.failed_stage = stage
        report.error = f"{type(exc).__name__}: {exc}"
        report.error_kind = "data" if isinstance(exc, RoadSimError) else "internal"
        log.warning("frame %s failed at stage %s: %s", frame_id, stage, report.error)
        _quarantine(output_root, frame_id, staging, report)
        return report
    finally:
        shutil.rmtree(staging, ignore_errors=True)


def run_pipeline(cfg: PipelineConfig) -> RunReport:
    """Process every requested frame and write run_report.json.

    Per-frame failures are contained (reported + quarantined); errors
    raised here mean the run as a whole could not start.
    """
    frame_ids = list(cfg.frames) if cfg.frames else discover_frames(cfg.scene_root)
    meshes: Dict[str, AssetMesh] = {}
    catalog: List[AssetSpec] = []
    if cfg.stages.sample:
        meshes, catalog = load_assets(cfg)
    keypoints_by_frame: Dict[str, Dict[str, list]] = {}
    if cfg.stages.calibrate:
        kp_path = cfg.keypoints_path()
        if kp_path is not None:
            keypoints_by_frame = load_keypoint_file(kp_path)

    output_root = Path(cfg.output_root)
    output_root.mkdir(parents=True, exist_ok=True)

    def work(fid: str) -> FrameReport:
        return process_frame(cfg, fid, keypoints_by_frame.get(fid), meshes, catalog)

    if cfg.workers > 1 and len(frame_ids) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            reports = list(pool.map(work, frame_ids))
    else:
        reports = [work(fid) for fid in frame_ids]
    reports.sort(key=lambda r: r.frame_id)
    shutil.rmtree(output_root / STAGING_DIR, ignore_errors=True)

    run = RunReport(seed=cfg.seed, frames=reports)
    report_path = output_root / "run_report.json"
    report_path.write_text(
        json.dumps(run.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return run


# ------------------------------------------------------- inspection helpers


def grid_cell_scores(cfg: PipelineConfig, frame_id: str) -> List[dict]:
    """Cell-by-cell sampler scores for one frame (gated cells get null
    terms so the output stays strict JSON)."""
    frame = load_scene(cfg.scene_root, frame_id)
    grid = build_grid(cfg.grid, frame.labels)
    existing = [Placement(box=b, asset_id="", source=Source.REAL) for b in frame.labels]
    scores = score_cells(grid, frame.rig, existing, cfg.sampler)

    def fin(v: float):
        return v if np.isfinite(v) else None

    out = []
    for s in scores:
        cx, cy = grid.cell_center(s.cell_index)
        out.append(
            {
                "cell_index": s.cell_index,
                "center": [cx, cy],
                "gated": not np.isfinite(s.total),
                "visibility": fin(s.visibility_term),
                "dispersion": s.dispersion_term,
                "total": fin(s.total),
            }
        )
    return out


def depth_summary(cfg: PipelineConfig, frame_id: str) -> dict:
    """Depth-stage report for one frame without writing anything."""
    frame = load_scene(cfg.scene_root, frame_id)
    report = FrameReport(frame_id=frame_id)
    depth_stage(frame, report)
    return {"frame_id": frame_id, "depth": report.depth}


def calibrate_batch(scene_root, keypoints_path, out_root) -> dict:
    """Refine extrinsics for every annotated frame; write the refined
    calib.json files under out_root/frames/<id>/<camera>/."""
    keypoints = load_keypoint_file(keypoints_path)
    out = Path(out_root)
    summary: Dict[str, dict] = {}
    for fid in sorted(keypoints):
        frame = load_scene(scene_root, fid)
        report = FrameReport(frame_id=fid)
        refined = refine_extrinsics(frame, keypoints[fid], report)
        for cam in refined.cameras:
            calib_path = out / "frames" / fid / cam.camera_id / "calib.json"
            calib_path.parent.mkdir(parents=True, exist_ok=True)
            save_calib(calib_path, cam.intrinsics, cam.extrinsics)
        summary[fid] = report.calibration
    return summary
