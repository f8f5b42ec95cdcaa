"""Scene ingestion and serialization.

Directory layout (all paths relative to a dataset root):

    frames/<frame_id>/cam<k>/image.png        8-bit RGB
    frames/<frame_id>/cam<k>/calib.json       intrinsics + world->camera extrinsics
    frames/<frame_id>/cam<k>/depth_rel.png    optional, 16-bit grayscale
    frames/<frame_id>/cam<k>/depth_rel.json   sidecar: float = png * scale + offset
    frames/<frame_id>/cam<k>/masks/*.png      optional binary instance masks
    frames/<frame_id>/labels.txt              one box per row, world frame
    frames/<frame_id>/cloud.bin               float32 little-endian, N x 3 (x 4 tolerated)
    assets/manifest.json                      asset_id -> mesh path, dims, class_id

Label rows are KITTI-flavoured text extended with an explicit frame flag:

    class_id track_id x y z length width height yaw world

Everything validates eagerly: a SceneFrame that loads is safe to use.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .depth import (
    MAX_SPARSE_DEPTH,
    InstanceMaskSet,
    RelativeDepthRaster,
    SparseDepthRaster,
)
from .errors import (
    DimensionMismatch,
    InvariantViolation,
    MissingFile,
    ParseError,
    SceneWriteError,
)
from .geometry import Box3D, CameraExtrinsics, CameraIntrinsics, CameraRig, RigCamera

LABEL_COLUMNS = 10
FRAME_FLAG = "world"


@dataclass(frozen=True, eq=False)
class CameraFrame:
    """One camera's slice of a frame: calibration, image, optional rasters."""

    camera_id: str
    image_path: str
    image: np.ndarray
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics
    relative_depth: Optional[RelativeDepthRaster] = None
    masks: Optional[InstanceMaskSet] = None

    def __init__(self, camera_id, image_path, image, intrinsics, extrinsics,
                 relative_depth=None, masks=None):
        img = np.asarray(image)
        if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
            raise InvariantViolation(f"image must be HxWx3 uint8, got {img.shape} {img.dtype}")
        if img.shape[:2] != (intrinsics.height, intrinsics.width):
            raise InvariantViolation(
                f"image is {img.shape[:2]} but intrinsics say "
                f"{(intrinsics.height, intrinsics.width)}"
            )
        if relative_depth is not None and relative_depth.shape != img.shape[:2]:
            raise InvariantViolation(
                f"relative depth {relative_depth.shape} vs image {img.shape[:2]}"
            )
        if masks is not None:
            for i, m in enumerate(masks.masks):
                if m.shape != img.shape[:2]:
                    raise InvariantViolation(f"mask {i} is {m.shape} vs image {img.shape[:2]}")
        img = img.copy()
        img.flags.writeable = False
        object.__setattr__(self, "camera_id", str(camera_id))
        object.__setattr__(self, "image_path", str(image_path))
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "intrinsics", intrinsics)
        object.__setattr__(self, "extrinsics", extrinsics)
        object.__setattr__(self, "relative_depth", relative_depth)
        object.__setattr__(self, "masks", masks)


@dataclass(frozen=True, eq=False)
class SceneFrame:
    """A fully validated multi-camera frame."""

    frame_id: str
    cameras: tuple
    labels: tuple
    cloud: np.ndarray  # (N, 3) world-frame points

    def __init__(self, frame_id, cameras, labels, cloud):
        cams = tuple(cameras)
        if not cams:
            raise InvariantViolation("a frame needs at least one camera")
        ids = [c.camera_id for c in cams]
        if len(set(ids)) != len(ids):
            raise InvariantViolation(f"duplicate camera ids: {ids}")
        boxes = tuple(labels)
        for b in boxes:
            if not isinstance(b, Box3D):
                raise InvariantViolation(f"labels must be Box3D, got {type(b).__name__}")
        pts = np.asarray(cloud, dtype=float)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvariantViolation(f"point cloud must be Nx3, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvariantViolation("point cloud contains non-finite values")
        pts = pts.copy()
        pts.flags.writeable = False
        object.__setattr__(self, "frame_id", str(frame_id))
        object.__setattr__(self, "cameras", cams)
        object.__setattr__(self, "labels", boxes)
        object.__setattr__(self, "cloud", pts)

    @property
    def images(self) -> Dict[str, np.ndarray]:
        return {c.camera_id: c.image for c in self.cameras}

    @property
    def rig(self) -> CameraRig:
        return CameraRig(
            [RigCamera(c.camera_id, c.intrinsics, c.extrinsics) for c in self.cameras]
        )

    def get_camera(self, camera_id: str) -> CameraFrame:
        for c in self.cameras:
            if c.camera_id == camera_id:
                return c
        raise KeyError(camera_id)


@dataclass(frozen=True)
class AssetEntry:
    mesh_path: str
    dims: Tuple[float, float, float]
    class_id: int = 0
    color: Tuple[float, float, float] = (0.6, 0.6, 0.65)

    def __post_init__(self):
        if len(self.dims) != 3 or any(d <= 0 for d in self.dims):
            raise InvariantViolation(f"asset dims must be 3 positive numbers, got {self.dims}")


@dataclass(frozen=True, eq=False)
class AssetManifest:
    entries: Dict[str, AssetEntry]

    def __init__(self, entries):
        items = dict(entries)
        for key, entry in items.items():
            if not isinstance(entry, AssetEntry):
                raise InvariantViolation(f"manifest entry {key!r} is not an AssetEntry")
        object.__setattr__(self, "entries", items)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, asset_id: str) -> AssetEntry:
        return self.entries[asset_id]


# ------------------------------------------------------------------ readers


def _read_json(path: Path) -> dict:
    if not path.is_file():
        raise MissingFile(str(path))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.msg, line=exc.lineno)


def _read_image(path: Path) -> np.ndarray:
    if not path.is_file():
        raise MissingFile(str(path))
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"))
    except UnidentifiedImageError:
        raise ParseError(path, "not a decodable image")


def _load_calib(path: Path) -> Tuple[CameraIntrinsics, CameraExtrinsics]:
    data = _read_json(path)
    try:
        intr_d = data["intrinsics"]
        extr_d = data["extrinsics"]
        quat = extr_d["quat_wxyz"]
        trans = extr_d["translation"]
    except (KeyError, TypeError) as exc:
        raise ParseError(path, f"missing calibration field {exc}")
    if not isinstance(quat, list) or len(quat) != 4:
        size = len(quat) if isinstance(quat, list) else type(quat).__name__
        raise ParseError(path, f"rotation must be a 4-element quaternion, got {size}")
    if not isinstance(trans, list) or len(trans) != 3:
        raise ParseError(path, "translation must have 3 elements")
    frame = extr_d.get("frame", "world_to_camera")
    if frame != "world_to_camera":
        raise ParseError(path, f"unsupported extrinsic convention {frame!r}")
    try:
        intr = CameraIntrinsics(
            fx=float(intr_d["fx"]), fy=float(intr_d["fy"]),
            cx=float(intr_d["cx"]), cy=float(intr_d["cy"]),
            width=int(intr_d["width"]), height=int(intr_d["height"]),
        )
        extr = CameraExtrinsics(quat, trans)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(path, f"bad calibration value: {exc}")
    except InvariantViolation as exc:
        raise InvariantViolation(f"{path}: {exc}")
    return intr, extr


def _load_labels(path: Path) -> List[Box3D]:
    if not path.is_file():
        raise MissingFile(str(path))
    boxes: List[Box3D] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != LABEL_COLUMNS:
                raise ParseError(path, f"expected {LABEL_COLUMNS} columns, got {len(parts)}",
                                 line=lineno)
            if parts[-1] != FRAME_FLAG:
                raise ParseError(path, f"unsupported frame flag {parts[-1]!r}", line=lineno)
            try:
                class_id = int(parts[0])
                track_id = int(parts[1])
                x, y, z, l, w, h, yaw = (float(p) for p in parts[2:9])
            except ValueError as exc:
                raise ParseError(path, str(exc), line=lineno)
            try:
                boxes.append(
                    Box3D((x, y, z), (l, w, h), yaw, class_id=class_id,
                          track_id=None if track_id < 0 else track_id)
                )
            except InvariantViolation as exc:
                raise InvariantViolation(f"{path}:{lineno}: {exc}")
    return boxes


def _load_cloud(path: Path) -> np.ndarray:
    if not path.is_file():
        raise MissingFile(str(path))
    raw = path.read_bytes()
    if len(raw) % 12 == 0:
        cols = 3
    elif len(raw) % 16 == 0:
        cols = 4
    else:
        raise ParseError(path, f"{len(raw)} bytes is not a whole number of float32 points")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, cols)[:, :3]
    return pts.astype(np.float64)


def _load_relative_depth(png_path: Path, camera_id: str) -> RelativeDepthRaster:
    sidecar = png_path.with_suffix(".json")
    if not sidecar.is_file():
        raise MissingFile(str(sidecar))
    meta = _read_json(sidecar)
    try:
        scale, offset = float(meta["scale"]), float(meta["offset"])
    except (KeyError, TypeError, ValueError):
        raise ParseError(sidecar, "sidecar needs numeric 'scale' and 'offset'")
    try:
        with Image.open(png_path) as img:
            raw = np.asarray(img, dtype=np.float64)
    except UnidentifiedImageError:
        raise ParseError(png_path, "not a decodable image")
    return RelativeDepthRaster(raw * scale + offset, camera_id=camera_id)


def _load_masks(masks_dir: Path, camera_id: str, image_shape) -> Optional[InstanceMaskSet]:
    if not masks_dir.is_dir():
        return None
    arrays = []
    for p in sorted(masks_dir.glob("*.png")):
        with Image.open(p) as img:
            arrays.append(np.asarray(img.convert("L")) > 127)
    try:
        return InstanceMaskSet(arrays, camera_id=camera_id, image_size=image_shape)
    except InvariantViolation as exc:
        raise InvariantViolation(f"{masks_dir}: {exc}")


def load_scene(root, frame_id: str) -> SceneFrame:
    """Load and fully validate one frame; errors always name the file."""
    frame_dir = Path(root) / "frames" / str(frame_id)
    if not frame_dir.is_dir():
        raise MissingFile(str(frame_dir))
    cam_dirs = sorted(p for p in frame_dir.iterdir() if p.is_dir() and p.name.startswith("cam"))
    if not cam_dirs:
        raise InvariantViolation(f"{frame_dir}: no camera directories")
    cameras = []
    for cam_dir in cam_dirs:
        intr, extr = _load_calib(cam_dir / "calib.json")
        image = _read_image(cam_dir / "image.png")
        depth_png = cam_dir / "depth_rel.png"
        rel = _load_relative_depth(depth_png, cam_dir.name) if depth_png.is_file() else None
        masks = _load_masks(cam_dir / "masks", cam_dir.name, image.shape[:2])
        try:
            cameras.append(
                CameraFrame(cam_dir.name, str(cam_dir / "image.png"), image, intr, extr,
                            relative_depth=rel, masks=masks)
            )
        except InvariantViolation as exc:
            raise InvariantViolation(f"{cam_dir}: {exc}")
    labels = _load_labels(frame_dir / "labels.txt")
    cloud = _load_cloud(frame_dir / "cloud.bin")
    try:
        return SceneFrame(frame_id, cameras, labels, cloud)
    except InvariantViolation as exc:
        raise InvariantViolation(f"{frame_dir}: {exc}")


def load_manifest(path) -> AssetManifest:
    path = Path(path)
    data = _read_json(path)
    assets = data.get("assets")
    if not isinstance(assets, dict):
        raise ParseError(path, "manifest needs an 'assets' object")
    entries = {}
    for asset_id, spec in assets.items():
        try:
            entries[asset_id] = AssetEntry(
                mesh_path=str(spec["mesh"]),
                dims=tuple(float(d) for d in spec["dims"]),
                class_id=int(spec.get("class_id", 0)),
                color=tuple(float(c) for c in spec.get("color", (0.6, 0.6, 0.65))),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(path, f"asset {asset_id!r}: {exc}")
        except InvariantViolation as exc:
            raise InvariantViolation(f"{path}: asset {asset_id!r}: {exc}")
    return AssetManifest(entries)


# ------------------------------------------------------------------ writers


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _calib_dict(intr: CameraIntrinsics, extr: CameraExtrinsics) -> dict:
    return {
        "intrinsics": {
            "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
            "width": intr.width, "height": intr.height,
        },
        "extrinsics": {
            "quat_wxyz": [float(v) for v in extr.quat_wxyz],
            "translation": [float(v) for v in extr.translation],
            "frame": "world_to_camera",
        },
    }


def save_calib(path, intr: CameraIntrinsics, extr: CameraExtrinsics) -> None:
    _write_json(Path(path), _calib_dict(intr, extr))


def _label_row(box: Box3D) -> str:
    track = -1 if box.track_id is None else box.track_id
    fields = [str(box.class_id), str(track)]
    fields += [repr(float(v)) for v in (*box.center, *box.dims, box.yaw)]
    fields.append(FRAME_FLAG)
    return " ".join(fields)


def save_labels(path, boxes: Sequence[Box3D]) -> None:
    rows = [_label_row(b) for b in boxes]
    Path(path).write_text("\n".join(rows) + ("\n" if rows else ""), encoding="utf-8")


def save_cloud(path, cloud: np.ndarray) -> None:
    pts = np.ascontiguousarray(np.asarray(cloud, dtype=np.float64), dtype="<f4")
    Path(path).write_bytes(pts.tobytes())


def encode_depth(values: np.ndarray) -> Tuple[np.ndarray, float, float]:
    """Quantize a float raster to uint16 plus (scale, offset) for decoding."""
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.zeros(values.shape, dtype=np.uint16), 1.0, lo
    scale = (hi - lo) / 65535.0
    quantized = np.rint((values - lo) / scale).astype(np.uint16)
    return quantized, scale, lo


def save_relative_depth(png_path, raster: RelativeDepthRaster) -> None:
    png_path = Path(png_path)
    quantized, scale, offset = encode_depth(raster.values)
    Image.fromarray(quantized).save(png_path)
    _write_json(png_path.with_suffix(".json"), {"scale": scale, "offset": offset})


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path)


def save_scene(frame: SceneFrame, out_root, composites=None, labels=None) -> dict:
    """Write a frame under out_root; returns a manifest of written paths.

    `composites` optionally replaces camera images (camera_id -> object
    with an `image` array); `labels` optionally replaces the frame's
    boxes and may contain Box3D or anything exposing a `box` attribute.
    """
    composites = composites or {}
    if labels is None:
        out_boxes = list(frame.labels)
    else:
        out_boxes = [lbl if isinstance(lbl, Box3D) else lbl.box for lbl in labels]
    frame_dir = Path(out_root) / "frames" / frame.frame_id
    manifest = {"frame_id": frame.frame_id, "images": {}, "calibs": {}, "depth": {}, "masks": {}}
    try:
        frame_dir.mkdir(parents=True, exist_ok=True)
        for cam in frame.cameras:
            cam_dir = frame_dir / cam.camera_id
            cam_dir.mkdir(exist_ok=True)
            image = cam.image
            comp = composites.get(cam.camera_id)
            if comp is not None:
                image = comp.image if hasattr(comp, "image") else np.asarray(comp)
            img_path = cam_dir / "image.png"
            Image.fromarray(np.asarray(image, dtype=np.uint8)).save(img_path)
            manifest["images"][cam.camera_id] = str(img_path)
            calib_path = cam_dir / "calib.json"
            save_calib(calib_path, cam.intrinsics, cam.extrinsics)
            manifest["calibs"][cam.camera_id] = str(calib_path)
            if cam.relative_depth is not None:
                depth_path = cam_dir / "depth_rel.png"
                save_relative_depth(depth_path, cam.relative_depth)
                manifest["depth"][cam.camera_id] = str(depth_path)
            if cam.masks is not None and len(cam.masks.masks):
                masks_dir = cam_dir / "masks"
                masks_dir.mkdir(exist_ok=True)
                written = []
                for i, m in enumerate(cam.masks.masks):
                    mask_path = masks_dir / f"{i:03d}.png"
                    save_mask(mask_path, m)
                    written.append(str(mask_path))
                manifest["masks"][cam.camera_id] = written
        labels_path = frame_dir / "labels.txt"
        save_labels(labels_path, out_boxes)
        manifest["labels"] = str(labels_path)
        cloud_path = frame_dir / "cloud.bin"
        save_cloud(cloud_path, frame.cloud)
        manifest["cloud"] = str(cloud_path)
    except OSError as exc:
        raise SceneWriteError(f"writing under {frame_dir}: {exc}")
    return manifest


def save_manifest(path, manifest: AssetManifest) -> None:
    data = {
        "assets": {
            asset_id: {
                "mesh": e.mesh_path,
                "dims": list(e.dims),
                "class_id": e.class_id,
                "color": list(e.color),
            }
            for asset_id, e in manifest.entries.items()
        }
    }
    _write_json(Path(path), data)


# ------------------------------------------------------------- projection


def project_pointcloud(cloud, extr: CameraExtrinsics, intr: CameraIntrinsics) -> SparseDepthRaster:
    """Splat world points to a sparse depth raster, keeping the minimum
    depth when several points land on one pixel."""
    pts = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    grid = np.full((intr.height, intr.width), np.inf)
    if len(pts):
        cam = pts @ extr.matrix().T + extr.translation
        z = cam[:, 2]
        ok = (z > 0) & (z < MAX_SPARSE_DEPTH)
        cam = cam[ok]
        z = z[ok]
        u = intr.fx * cam[:, 0] / z + intr.cx
        v = intr.fy * cam[:, 1] / z + intr.cy
        px = np.floor(u).astype(np.int64)
        py = np.floor(v).astype(np.int64)
        inside = (px >= 0) & (px < intr.width) & (py >= 0) & (py < intr.height)
        np.minimum.at(grid, (py[inside], px[inside]), z[inside])
    valid = np.isfinite(grid)
    values = np.where(valid, grid, 0.0)
    return SparseDepthRaster(values, valid)
