"""Software z-buffer compositor for placing 3D assets onto real images.

Deliberately minimal rendering: flat Lambert shading, no textures, no
anti-aliasing. What matters here is geometric correctness: perspective
projection that agrees with the pinhole model, perspective-correct
depth interpolation (1/z linear in screen space), near-plane clipping,
and a per-pixel depth test against both the shared z-buffer and the
calibrated foreground depth so real objects occlude inserted assets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .depth import ForegroundDepth
from .errors import DimensionMismatch, InvariantViolation, ParseError
from .geometry import Box3D, CameraExtrinsics, CameraIntrinsics, CameraRig
from .placement import Placement, Source

log = logging.getLogger(__name__)

CLIP_NEAR = 1e-3  # meters, camera-space near plane for clipping
DEGENERATE_AREA = 1e-12  # px^2, screen-space triangles below this are skipped


@dataclass(frozen=True, eq=False)
class AssetMesh:
    """Triangle mesh in asset-local meters: origin at the footprint center,
    +x forward, z up from the ground plane."""

    asset_id: str
    vertices: np.ndarray  # (N, 3)
    triangles: np.ndarray  # (M, 3) int indices
    colors: np.ndarray  # (M, 3) float in [0, 1]
    dims: np.ndarray  # nominal (l, w, h)

    def __init__(self, asset_id, vertices, triangles, colors, dims):
        v = np.asarray(vertices, dtype=float).reshape(-1, 3)
        t = np.asarray(triangles, dtype=int).reshape(-1, 3)
        c = np.asarray(colors, dtype=float).reshape(-1, 3)
        d = np.asarray(dims, dtype=float).reshape(-1)
        if d.shape != (3,) or not np.all(d > 0):
            raise InvariantViolation("dims must be three positive numbers")
        if len(t) < 12:
            raise InvariantViolation(f"mesh needs at least 12 triangles, got {len(t)}")
        if t.min() < 0 or t.max() >= len(v):
            raise InvariantViolation("triangle indices out of range")
        if c.shape != (len(t), 3) or c.min() < 0 or c.max() > 1:
            raise InvariantViolation("need one RGB color in [0, 1] per triangle")
        extent = v.max(axis=0) - v.min(axis=0)
        if np.any(np.abs(extent - d) > 0.05 * d):
            raise InvariantViolation(
                f"mesh bounding box {extent} deviates more than 5% from nominal dims {d}"
            )
        for arr in (v, t, c, d):
            arr.flags.writeable = False
        object.__setattr__(self, "asset_id", str(asset_id))
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "colors", c)
        object.__setattr__(self, "dims", d)


@dataclass(frozen=True)
class LightingConfig:
    direction: Tuple[float, float, float] = (0.4, -0.3, -0.85)  # travel direction, world
    ambient: float = 0.35
    diffuse: float = 0.65


@dataclass(frozen=True, eq=False)
class Composite:
    image: np.ndarray  # H x W x 3 uint8
    depth: np.ndarray  # H x W float, +inf where nothing rendered
    coverage: np.ndarray  # H x W bool
    clipped_out: bool = False  # asset entirely behind the near plane


@dataclass(frozen=True)
class SceneLabel:
    box: Box3D
    source: Source
    asset_id: Optional[str] = None
    visible_in: Dict[str, bool] = field(default_factory=dict)


@dataclass(frozen=True)
class RenderConfig:
    lighting: LightingConfig = LightingConfig()
    visible_threshold_px: int = 50


@dataclass(frozen=True, eq=False)
class RenderResult:
    composites: Dict[str, Composite]
    labels: List[SceneLabel]
    errors: Dict[str, str]
    coverage_counts: Dict[str, List[int]]  # camera -> per-placement final pixel counts


def box_mesh(asset_id: str, dims, color=(0.7, 0.1, 0.1)) -> AssetMesh:
    """12-triangle cuboid matching dims exactly, outward-CCW winding."""
    l, w, h = np.asarray(dims, dtype=float)
    xs, ys = (-l / 2, l / 2), (-w / 2, w / 2)
    verts = np.array([[x, y, z] for z in (0.0, h) for y in ys for x in xs])
    # vertex layout: bit0 = +x, bit1 = +y, bit2 = top
    quads = [
        (0, 2, 3, 1),  # bottom (z=0), normal -z
        (4, 5, 7, 6),  # top, normal +z
        (0, 1, 5, 4),  # -y side
        (2, 6, 7, 3),  # +y side
        (0, 4, 6, 2),  # -x side
        (1, 3, 7, 5),  # +x side
    ]
    tris = []
    for a, b, c, d in quads:
        tris.append((a, b, c))
        tris.append((a, c, d))
    colors = np.tile(np.asarray(color, dtype=float), (12, 1))
    return AssetMesh(asset_id, verts, np.array(tris), colors, (l, w, h))


def load_obj(path, asset_id: str, dims, color=(0.6, 0.6, 0.65)) -> AssetMesh:
    """Minimal OBJ reader: v and f lines, faces fan-triangulated."""
    verts: List[List[float]] = []
    tris: List[Tuple[int, int, int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ParseError(str(path), "vertex line needs 3 coordinates", line=lineno)
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError:
                    raise ParseError(str(path), f"bad vertex coordinates {parts[1:4]}", line=lineno)
            elif parts[0] == "f":
                try:
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                except ValueError:
                    raise ParseError(str(path), f"bad face indices {parts[1:]}", line=lineno)
                if len(idx) < 3:
                    raise ParseError(str(path), "face needs at least 3 vertices", line=lineno)
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    tris.append((idx[0], idx[k], idx[k + 1]))
            # other directives (vn, vt, usemtl, ...) are ignored
    colors = np.tile(np.asarray(color, dtype=float), (len(tris), 1))
    return AssetMesh(asset_id, np.asarray(verts), np.asarray(tris), colors, dims)


def _world_triangles(mesh: AssetMesh, placement: Placement) -> np.ndarray:
    """(M, 3, 3) world-space triangle soup for the placement."""
    box = placement.box
    extent = mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)
    scale = np.array([box.length, box.width, box.height]) / extent
    local = mesh.vertices * scale
    ca, sa = np.cos(box.yaw), np.sin(box.yaw)
    R = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    origin = np.array([box.center[0], box.center[1], box.center[2] - box.height / 2.0])
    world = local @ R.T + origin
    return world[mesh.triangles]


def _shade(tri_world: np.ndarray, base: np.ndarray, lighting: LightingConfig) -> np.ndarray:
    """Flat Lambert color per triangle, uint8."""
    n = np.cross(tri_world[:, 1] - tri_world[:, 0], tri_world[:, 2] - tri_world[:, 0])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)
    light = -np.asarray(lighting.direction, dtype=float)
    light = light / np.linalg.norm(light)
    lam = np.clip(lighting.ambient + lighting.diffuse * np.clip(n @ light, 0.0, None), 0.0, 1.0)
    return np.clip(base * lam[:, None] * 255.0, 0.0, 255.0).astype(np.uint8)


def _clip_near(tri_cam: np.ndarray) -> List[np.ndarray]:
    """Sutherland-Hodgman clip of one camera-space triangle against z >= CLIP_NEAR.

    Returns 0, 1, or 2 triangles (a clipped quad is fanned).
    """
    inside = tri_cam[:, 2] >= CLIP_NEAR
    if inside.all():
        return [tri_cam]
    if not inside.any():
        return []
    poly = []
    for i in range(3):
        a, b = tri_cam[i], tri_cam[(i + 1) % 3]
        a_in, b_in = inside[i], inside[(i + 1) % 3]
        if a_in:
            poly.append(a)
        if a_in != b_in:
            t = (CLIP_NEAR - a[2]) / (b[2] - a[2])
            poly.append(a + t * (b - a))
    out = []
    for k in range(1, len(poly) - 1):
        out.append(np.stack([poly[0], poly[k], poly[k + 1]]))
    return out


def _raster_pass(
    tris_world: np.ndarray,
    shaded: np.ndarray,
    extr: CameraExtrinsics,
    intr: CameraIntrinsics,
    occlusion: np.ndarray,
    image: np.ndarray,
    zbuf: np.ndarray,
    owner: np.ndarray,
    owner_id: int,
) -> bool:
    """Rasterize one asset into shared buffers; returns True if any triangle survived clipping."""
    R, t = extr.matrix(), extr.translation
    cams = tris_world @ R.T + t
    # back-face culling in camera space: outward normal pointing away
    n = np.cross(cams[:, 1] - cams[:, 0], cams[:, 2] - cams[:, 0])
    centroid = cams.mean(axis=1)
    front = np.einsum("ij,ij->i", n, centroid) < 0.0
    h, w = occlusion.shape
    survived = False
    for tri_idx in np.flatnonzero(front):
        for tri in _clip_near(cams[tri_idx]):
            survived = True
            z = tri[:, 2]
            u = intr.fx * tri[:, 0] / z + intr.cx
            v = intr.fy * tri[:, 1] / z + intr.cy
            area = (u[1] - u[0]) * (v[2] - v[0]) - (u[2] - u[0]) * (v[1] - v[0])
            if abs(area) < DEGENERATE_AREA:
                continue
            u0 = max(int(np.floor(min(u) - 0.5)), 0)
            u1 = min(int(np.ceil(max(u) - 0.5)), w - 1)
            v0 = max(int(np.floor(min(v) - 0.5)), 0)
            v1 = min(int(np.ceil(max(v) - 0.5)), h - 1)
            if u0 > u1 or v0 > v1:
                continue
            px = np.arange(u0, u1 + 1) + 0.5
            py = np.arange(v0, v1 + 1) + 0.5
            gu, gv = np.meshgrid(px, py)
            l0 = (u[1] - gu) * (v[2] - gv) - (u[2] - gu) * (v[1] - gv)
            l1 = (u[2] - gu) * (v[0] - gv) - (u[0] - gu) * (v[2] - gv)
            l2 = (u[0] - gu) * (v[1] - gv) - (u[1] - gu) * (v[0] - gv)
            lam = np.stack([l0, l1, l2]) / area
            inside = (lam >= 0.0).all(axis=0)
            if not inside.any():
                continue
            inv_z = (lam * (1.0 / z)[:, None, None]).sum(axis=0)
            depth = np.full(inv_z.shape, np.inf)
            np.divide(1.0, inv_z, out=depth, where=inv_z > 0)
            window_z = zbuf[v0 : v1 + 1, u0 : u1 + 1]
            window_occ = occlusion[v0 : v1 + 1, u0 : u1 + 1]
            write = inside & (depth < window_z) & (depth < window_occ)
            if not write.any():
                continue
            window_z[write] = depth[write]
            image[v0 : v1 + 1, u0 : u1 + 1][write] = shaded[tri_idx]
            owner[v0 : v1 + 1, u0 : u1 + 1][write] = owner_id
    return survived


def rasterize(
    mesh: AssetMesh,
    placement: Placement,
    extr: CameraExtrinsics,
    intr: CameraIntrinsics,
    occlusion: ForegroundDepth,
    background: np.ndarray,
    lighting: Optional[LightingConfig] = None,
) -> Composite:
    """Render one asset over the background with occlusion; see module docstring."""
    bg = np.asarray(background)
    if bg.ndim != 3 or bg.shape[2] != 3:
        raise DimensionMismatch(f"background must be HxWx3, got {bg.shape}")
    if bg.shape[:2] != occlusion.shape:
        raise DimensionMismatch(f"occlusion {occlusion.shape} vs image {bg.shape[:2]}")
    if bg.shape[:2] != (intr.height, intr.width):
        raise DimensionMismatch(
            f"image {bg.shape[:2]} vs intrinsics {(intr.height, intr.width)}"
        )
    light = lighting or LightingConfig()
    tris = _world_triangles(mesh, placement)
    shaded = _shade(tris, mesh.colors, light)
    image = bg.astype(np.uint8, copy=True)
    zbuf = np.full(bg.shape[:2], np.inf)
    owner = np.full(bg.shape[:2], -1, dtype=np.int32)
    survived = _raster_pass(tris, shaded, extr, intr, occlusion.values, image, zbuf, owner, 0)
    if not survived:
        log.info("asset %s fully clipped for this camera", mesh.asset_id)
    return Composite(image=image, depth=zbuf, coverage=owner == 0, clipped_out=not survived)


def render_scene(
    frame,
    placements: Sequence[Placement],
    assets: Dict[str, AssetMesh],
    rig: CameraRig,
    occlusions: Optional[Dict[str, ForegroundDepth]] = None,
    config: Optional[RenderConfig] = None,
) -> RenderResult:
    """Render all placements into all cameras over a shared per-camera z-buffer.

    `frame` must expose `images` (camera_id -> HxWx3 uint8) and `labels`
    (list of Box3D); camera failures are reported per camera in
    `errors` without aborting the rest.
    """
    cfg = config or RenderConfig()
    occlusions = occlusions or {}
    composites: Dict[str, Composite] = {}
    errors: Dict[str, str] = {}
    counts: Dict[str, List[int]] = {}
    for cam in rig:
        cid = cam.camera_id
        try:
            bg = np.asarray(frame.images[cid])
            occ = occlusions.get(cid)
            occ_values = occ.values if occ is not None else np.full(bg.shape[:2], np.inf)
            if bg.shape[:2] != occ_values.shape:
                raise DimensionMismatch(f"occlusion {occ_values.shape} vs image {bg.shape[:2]}")
            if bg.shape[:2] != (cam.intrinsics.height, cam.intrinsics.width):
                raise DimensionMismatch(
                    f"image {bg.shape[:2]} vs intrinsics "
                    f"{(cam.intrinsics.height, cam.intrinsics.width)}"
                )
            image = bg.astype(np.uint8, copy=True)
            zbuf = np.full(bg.shape[:2], np.inf)
            owner = np.full(bg.shape[:2], -1, dtype=np.int32)
            for i, placement in enumerate(placements):
                mesh = assets[placement.asset_id]
                tris = _world_triangles(mesh, placement)
                shaded = _shade(tris, mesh.colors, cfg.lighting)
                _raster_pass(
                    tris, shaded, cam.extrinsics, cam.intrinsics, occ_values,
                    image, zbuf, owner, i,
                )
            composites[cid] = Composite(image=image, depth=zbuf, coverage=owner >= 0)
            counts[cid] = [int(np.count_nonzero(owner == i)) for i in range(len(placements))]
        except (DimensionMismatch, KeyError) as exc:
            errors[cid] = f"{type(exc).__name__}: {exc}"
    labels = [SceneLabel(box=b, source=Source.REAL) for b in frame.labels]
    for i, placement in enumerate(placements):
        visible = {
            cid: counts[cid][i] > cfg.visible_threshold_px
            for cid in composites
        }
        labels.append(
            SceneLabel(
                box=placement.box,
                source=Source.SIMULATED,
                asset_id=placement.asset_id,
                visible_in=visible,
            )
        )
    return RenderResult(composites=composites, labels=labels, errors=errors, coverage_counts=counts)
