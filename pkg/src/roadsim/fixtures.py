"""Synthetic scene generation with exactly known ground truth.

The generated directory is a valid dataset for the whole pipeline, plus
a `ground_truth.json` sidecar that only tests read. Two details make
the ground truth exact rather than approximate:

- The relative-depth raster is quantized to its on-disk 16-bit form
  first, and the fixture's "true" metric depth is defined from the
  DECODED raster. The affine relation Z = a * D_rel + b then holds
  bit-for-bit on every pixel a consumer can observe.
- LiDAR points are back-projected from that decoded raster, one per
  sampled pixel, and kept only when they are visible in exactly one
  camera. Every camera's sparse depth therefore comes purely from its
  own decoded raster and the affine fit recovers (a, b) to float
  precision.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .errors import InvariantViolation, SceneWriteError
from .geometry import (
    Box3D,
    CameraExtrinsics,
    CameraIntrinsics,
    CameraRig,
    RigCamera,
    box_corners,
    look_at_extrinsics,
    project,
    project_points,
)
from .placement import Placement, Source, footprints_overlap
from .render import box_mesh, rasterize, render_scene
from .depth import ForegroundDepth, RelativeDepthRaster
from .scene_io import (
    AssetEntry,
    AssetManifest,
    _write_json,
    encode_depth,
    save_calib,
    save_cloud,
    save_labels,
    save_manifest,
    save_mask,
)
from PIL import Image

PALETTE = [(0.70, 0.15, 0.15), (0.15, 0.35, 0.70), (0.80, 0.65, 0.15),
           (0.20, 0.55, 0.25), (0.55, 0.25, 0.60), (0.60, 0.60, 0.60)]

CATALOG = {
    "sedan": ((4.2, 1.8, 1.5), 1, (0.62, 0.18, 0.18)),
    "suv": ((4.6, 1.9, 1.8), 1, (0.18, 0.32, 0.62)),
    "van": ((5.2, 2.0, 2.2), 1, (0.72, 0.62, 0.20)),
}


@dataclass(frozen=True)
class FixtureConfig:
    n_cameras: int = 2
    n_boxes: int = 3
    n_frames: int = 1
    width: int = 640
    height: int = 480
    depth_a: float = 2.0
    depth_b: float = 0.5
    sky_depth: float = 80.0
    cloud_points_per_camera: int = 400
    keypoint_noise_px: float = 0.0
    extrinsic_rot_deg: float = 0.0
    extrinsic_trans_m: float = 0.0

    def __post_init__(self):
        if self.n_cameras < 1:
            raise InvariantViolation("need at least one camera")
        if self.n_boxes < 0 or self.n_frames < 1:
            raise InvariantViolation("n_boxes must be >= 0 and n_frames >= 1")
        if self.depth_a <= 0:
            raise InvariantViolation("depth_a must be positive")
        if not 0 < self.sky_depth < 1000.0:
            raise InvariantViolation("sky_depth must be in (0, 1000)")
        if self.width < 32 or self.height < 32:
            raise InvariantViolation("image must be at least 32x32")


def _intrinsics(cfg: FixtureConfig) -> CameraIntrinsics:
    return CameraIntrinsics(
        fx=600.0 * cfg.width / 640.0,
        fy=600.0 * cfg.width / 640.0,
        cx=cfg.width / 2.0,
        cy=cfg.height / 2.0,
        width=cfg.width,
        height=cfg.height,
    )


def _camera_poses(cfg: FixtureConfig, rng) -> List[CameraExtrinsics]:
    poses = []
    for k in range(cfg.n_cameras):
        frac = k / max(cfg.n_cameras - 1, 1)
        eye = np.array([
            -8.0 + 28.0 * frac,
            -13.0 if k % 2 == 0 else 13.0,
            5.0 + 0.7 * k,
        ]) + rng.uniform(-1.0, 1.0, size=3) * np.array([0.8, 0.8, 0.3])
        target = np.array([10.0, 0.0, 1.0]) + rng.uniform(-0.5, 0.5, size=3)
        poses.append(look_at_extrinsics(eye, target))
    return poses


def _background(cfg: FixtureConfig, cam_index: int) -> np.ndarray:
    ys = np.arange(cfg.height)[:, None]
    xs = np.arange(cfg.width)[None, :]
    img = np.empty((cfg.height, cfg.width, 3), dtype=np.uint8)
    img[..., 0] = (ys * 160 // cfg.height + 40).astype(np.uint8)
    img[..., 1] = (xs * 160 // cfg.width + 40).astype(np.uint8)
    img[..., 2] = (((xs + ys) // 16 % 2) * 30 + 60 + 25 * cam_index).astype(np.uint8)
    return img


def _sample_boxes(cfg: FixtureConfig, rng) -> List[Box3D]:
    boxes: List[Box3D] = []
    attempts = 0
    while len(boxes) < cfg.n_boxes:
        if attempts > 1000:
            raise InvariantViolation("could not place non-overlapping fixture boxes")
        attempts += 1
        dims = np.array([4.2, 1.8, 1.5]) + rng.uniform(-1.0, 1.0, 3) * np.array([0.3, 0.15, 0.15])
        center = np.array([rng.uniform(4.0, 18.0), rng.uniform(-4.5, 4.5), dims[2] / 2.0])
        box = Box3D(center, dims, rng.uniform(-np.pi, np.pi), class_id=1, track_id=len(boxes))
        if any(footprints_overlap(box, other) for other in boxes):
            continue
        boxes.append(box)
    return boxes


def _background_depth(cfg: FixtureConfig, extr: CameraExtrinsics,
                      intr: CameraIntrinsics) -> np.ndarray:
    """Per-pixel depth of the empty scene: ground plane z=0, sky beyond."""
    R = extr.matrix()
    origin = -R.T @ extr.translation
    u = np.arange(cfg.width) + 0.5
    v = np.arange(cfg.height) + 0.5
    gu, gv = np.meshgrid(u, v)
    d_cam = np.stack([(gu - intr.cx) / intr.fx, (gv - intr.cy) / intr.fy, np.ones_like(gu)],
                     axis=-1)
    d_world = d_cam @ R  # rows transformed by R.T
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origin[2] / d_world[..., 2]
    # camera depth along the ray equals t because d_cam has unit z
    depth = np.where((d_world[..., 2] < 0) & (t > 0), t, cfg.sky_depth)
    return np.minimum(depth, cfg.sky_depth)


def _keypoint_entries(boxes: List[Box3D], extr: CameraExtrinsics, intr: CameraIntrinsics,
                      rng, noise_px: float) -> List[dict]:
    entries = []
    for box_index, box in enumerate(boxes):
        for corner_index, corner in enumerate(box_corners(box)):
            px = project(corner, extr, intr)
            if px is None:
                continue
            u = px.u + (rng.normal(0.0, noise_px) if noise_px > 0 else 0.0)
            v = px.v + (rng.normal(0.0, noise_px) if noise_px > 0 else 0.0)
            if not (0 <= u < intr.width and 0 <= v < intr.height):
                continue
            entries.append({"box_index": box_index, "corner_index": corner_index,
                            "u": u, "v": v})
    return entries


def write_box_obj(path, dims) -> None:
    """Export the cuboid mesh as a minimal OBJ file."""
    mesh = box_mesh("box", dims)
    lines = [f"v {float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_asset_library(out_root: Path) -> None:
    assets_dir = out_root / "assets"
    assets_dir.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, (dims, class_id, color) in CATALOG.items():
        write_box_obj(assets_dir / f"{name}.obj", dims)
        entries[name] = AssetEntry(f"{name}.obj", dims, class_id=class_id, color=color)
    save_manifest(assets_dir / "manifest.json", AssetManifest(entries))


def generate_fixture(config: FixtureConfig, seed: int, out_root) -> dict:
    """Write a synthetic dataset under out_root; returns a summary with paths."""
    cfg = config
    out_root = Path(out_root)
    rng = np.random.default_rng(seed)
    intr = _intrinsics(cfg)
    true_poses = _camera_poses(cfg, rng)
    cam_ids = [f"cam{k}" for k in range(cfg.n_cameras)]
    rig = CameraRig([RigCamera(cid, intr, pose) for cid, pose in zip(cam_ids, true_poses)])

    perturbations = {}
    written_poses = {}
    for cid, pose in zip(cam_ids, true_poses):
        if cfg.extrinsic_rot_deg > 0 or cfg.extrinsic_trans_m > 0:
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            omega = axis * np.deg2rad(cfg.extrinsic_rot_deg)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            tau = direction * cfg.extrinsic_trans_m
        else:
            omega = np.zeros(3)
            tau = np.zeros(3)
        perturbations[cid] = {"rot": omega.tolist(), "trans": tau.tolist()}
        written_poses[cid] = pose.compose_delta(omega, tau)

    backgrounds = {cid: _background(cfg, k) for k, cid in enumerate(cam_ids)}
    bg_depths = {cid: _background_depth(cfg, pose, intr)
                 for cid, pose in zip(cam_ids, true_poses)}

    try:
        _write_asset_library(out_root)
        frames_meta = {}
        keypoints_meta: Dict[str, dict] = {}
        frame_ids = [f"{i:06d}" for i in range(cfg.n_frames)]
        for frame_id in frame_ids:
            boxes = _sample_boxes(cfg, rng)
            meshes = {f"fix{i:02d}": box_mesh(f"fix{i:02d}", box.dims,
                                              color=PALETTE[i % len(PALETTE)])
                      for i, box in enumerate(boxes)}
            placements = [Placement(box=box, asset_id=f"fix{i:02d}", source=Source.REAL)
                          for i, box in enumerate(boxes)]
            frame_stub = type("Frame", (), {"images": backgrounds, "labels": []})()
            rendered = render_scene(frame_stub, placements, meshes, rig)
            if rendered.errors:
                raise InvariantViolation(f"fixture rendering failed: {rendered.errors}")

            frame_dir = out_root / "frames" / frame_id
            cloud_parts = []
            cloud_pixel_meta = {}
            for cid, pose in zip(cam_ids, true_poses):
                cam_dir = frame_dir / cid
                cam_dir.mkdir(parents=True, exist_ok=True)
                comp = rendered.composites[cid]
                Image.fromarray(comp.image).save(cam_dir / "image.png")
                save_calib(cam_dir / "calib.json", intr, written_poses[cid])

                scene_depth = np.minimum(bg_depths[cid], comp.depth)
                rel_raw = (scene_depth - cfg.depth_b) / cfg.depth_a
                quantized, scale, offset = encode_depth(rel_raw)
                Image.fromarray(quantized).save(cam_dir / "depth_rel.png")
                _write_json(cam_dir / "depth_rel.json", {"scale": scale, "offset": offset})
                decoded = quantized.astype(np.float64) * scale + offset
                z_used = cfg.depth_a * decoded + cfg.depth_b

                masks_dir = cam_dir / "masks"
                masks_dir.mkdir(exist_ok=True)
                empty_occ = ForegroundDepth.all_background((cfg.height, cfg.width))
                for i, placement in enumerate(placements):
                    solo = rasterize(meshes[placement.asset_id], placement, pose, intr,
                                     empty_occ, backgrounds[cid])
                    if solo.coverage.any():
                        save_mask(masks_dir / f"{i:03d}.png", solo.coverage)

                flat = rng.choice(cfg.height * cfg.width,
                                  size=min(cfg.cloud_points_per_camera, cfg.height * cfg.width),
                                  replace=False)
                iy, ix = np.divmod(flat, cfg.width)
                z = z_used[iy, ix]
                cam_pts = np.stack([
                    (ix + 0.5 - intr.cx) / intr.fx * z,
                    (iy + 0.5 - intr.cy) / intr.fy * z,
                    z,
                ], axis=1)
                world = pose.inverse_transform(cam_pts)
                counts = np.zeros(len(world), dtype=int)
                for other in true_poses:
                    uv, depth, in_front = project_points(world, other, intr)
                    visible = (in_front & (uv[:, 0] >= 0) & (uv[:, 0] < intr.width)
                               & (uv[:, 1] >= 0) & (uv[:, 1] < intr.height))
                    counts += visible.astype(int)
                keep = counts == 1
                cloud_parts.append(world[keep])
                cloud_pixel_meta[cid] = int(keep.sum())

            cloud = np.concatenate(cloud_parts) if cloud_parts else np.zeros((0, 3))
            save_labels(frame_dir / "labels.txt", boxes)
            save_cloud(frame_dir / "cloud.bin", cloud)

            keypoints_meta[frame_id] = {
                cid: _keypoint_entries(boxes, pose, intr, rng, cfg.keypoint_noise_px)
                for cid, pose in zip(cam_ids, true_poses)
            }
            frames_meta[frame_id] = {"n_boxes": len(boxes), "cloud_points": cloud_pixel_meta}

        keypoints_path = out_root / "keypoints.json"
        _write_json(keypoints_path, {"frames": keypoints_meta})
        truth_path = out_root / "ground_truth.json"
        _write_json(truth_path, {
            "seed": seed,
            "config": asdict(cfg),
            "depth": {"a": cfg.depth_a, "b": cfg.depth_b, "sky": cfg.sky_depth},
            "cameras": {
                cid: {
                    "true_extrinsics": {
                        "quat_wxyz": [float(x) for x in pose.quat_wxyz],
                        "translation": [float(x) for x in pose.translation],
                    },
                    "perturbation": perturbations[cid],
                }
                for cid, pose in zip(cam_ids, true_poses)
            },
            "frames": frames_meta,
        })
    except OSError as exc:
        raise SceneWriteError(f"writing fixture under {out_root}: {exc}")

    return {
        "root": str(out_root),
        "frames": frame_ids,
        "cameras": cam_ids,
        "ground_truth": str(truth_path),
        "keypoints": str(keypoints_path),
        "manifest": str(out_root / "assets" / "manifest.json"),
    }


def load_ground_truth(root) -> dict:
    with open(Path(root) / "ground_truth.json", "r", encoding="utf-8") as fh:
        return json.load(fh)


def true_extrinsics(truth: dict, camera_id: str) -> CameraExtrinsics:
    entry = truth["cameras"][camera_id]["true_extrinsics"]
    return CameraExtrinsics(entry["quat_wxyz"], entry["translation"])
