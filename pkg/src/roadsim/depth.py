"""Calibrated foreground depth from relative depth, masks, and LiDAR.

Monocular depth nets output a unitless proxy; LiDAR returns are metric
but sparse. Fitting the affine map Z = a * D_rel + b over LiDAR-valid
pixels (restricted to the foreground mask by default) turns the dense
proxy into dense metric depth for the pixels that matter: the vehicles
that will occlude inserted assets. Background pixels stay at +inf so
the compositor treats them as infinitely far.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import (
    DegenerateFit,
    DimensionMismatch,
    EmptyEvaluation,
    InvariantViolation,
)

log = logging.getLogger(__name__)

MIN_DEPTH = 0.01  # meters; floor for calibrated values that came out negative
MAX_SPARSE_DEPTH = 1000.0


def _as_raster(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 2:
        raise InvariantViolation(f"{name} must be a 2-D raster, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class RelativeDepthRaster:
    values: np.ndarray
    camera_id: str = ""

    def __init__(self, values, camera_id=""):
        arr = _as_raster(values, "relative depth")
        if not np.all(np.isfinite(arr)):
            raise InvariantViolation("relative depth must be finite everywhere")
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "camera_id", str(camera_id))

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class SparseDepthRaster:
    values: np.ndarray
    valid: np.ndarray

    def __init__(self, values, valid):
        arr = _as_raster(values, "sparse depth")
        mask = np.asarray(valid, dtype=bool)
        if mask.shape != arr.shape:
            raise DimensionMismatch(f"validity mask {mask.shape} vs depth {arr.shape}")
        picked = arr[mask]
        if picked.size and not np.all((picked > 0) & (picked < MAX_SPARSE_DEPTH)):
            raise InvariantViolation(f"valid sparse depths must lie in (0, {MAX_SPARSE_DEPTH})")
        arr = arr.copy()
        mask = mask.copy()
        arr.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "valid", mask)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class InstanceMaskSet:
    """Binary instance masks for one camera; masks may overlap."""

    masks: tuple
    camera_id: str = ""
    image_size: Optional[Tuple[int, int]] = None  # (H, W), used when masks is empty

    def __init__(self, masks, camera_id="", image_size=None):
        cleaned = []
        for i, m in enumerate(masks):
            arr = np.asarray(m).astype(bool)
            if arr.ndim != 2:
                raise InvariantViolation(f"mask {i} must be 2-D, got shape {arr.shape}")
            if not arr.any():
                raise InvariantViolation(f"mask {i} is empty")
            arr.flags.writeable = False
            cleaned.append(arr)
        object.__setattr__(self, "masks", tuple(cleaned))
        object.__setattr__(self, "camera_id", str(camera_id))
        object.__setattr__(self, "image_size", tuple(image_size) if image_size is not None else None)

    def __len__(self):
        return len(self.masks)


@dataclass(frozen=True, eq=False)
class ForegroundDepth:
    """Metric depth on foreground pixels, +inf sentinel elsewhere."""

    values: np.ndarray
    mask: np.ndarray
    clamped_count: int = 0

    def __init__(self, values, mask, clamped_count=0):
        arr = _as_raster(values, "foreground depth")
        m = np.asarray(mask, dtype=bool)
        if m.shape != arr.shape:
            raise DimensionMismatch(f"mask {m.shape} vs depth {arr.shape}")
        finite = np.isfinite(arr)
        if not np.array_equal(finite, m):
            raise InvariantViolation("mask must be 1 exactly where depth is finite")
        if finite.any() and not np.all(arr[finite] > 0):
            raise InvariantViolation("finite foreground depths must be positive")
        if not np.all(arr[~finite] == np.inf):
            raise InvariantViolation("background sentinel must be +inf")
        arr = arr.copy()
        m = m.copy()
        arr.flags.writeable = False
        m.flags.writeable = False
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "clamped_count", int(clamped_count))

    @classmethod
    def all_background(cls, shape) -> "ForegroundDepth":
        return cls(np.full(shape, np.inf), np.zeros(shape, dtype=bool))

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class AffineDepthCalibration:
    a: float
    b: float
    inlier_count: int
    rms_error: float

    def __post_init__(self):
        if self.inlier_count < 2:
            raise InvariantViolation("calibration needs at least 2 fit pixels")
        if self.a <= 0:
            # the proxy is assumed to increase with distance; a flipped sign
            # means the upstream model used the opposite convention
            log.warning("fitted depth scale a=%g is not positive; check the relative-depth convention", self.a)


def select_foreground(
    masks: InstanceMaskSet,
    centers: Sequence,
    image_size: Tuple[int, int],
) -> InstanceMaskSet:
    """Keep masks that are small (< H*W/4 pixels) and contain a projected box center.

    The size filter drops ground/sky segments; the center test ties each
    kept mask to an actual labeled object.
    """
    h, w = image_size
    limit = h * w / 4.0
    pts = np.asarray(centers, dtype=float).reshape(-1, 2)
    rounded = np.rint(pts).astype(int)
    in_bounds = (
        (rounded[:, 0] >= 0) & (rounded[:, 0] < w) & (rounded[:, 1] >= 0) & (rounded[:, 1] < h)
    )
    rounded = rounded[in_bounds]
    kept = []
    for m in masks.masks:
        if m.sum() >= limit:
            continue
        if any(m[v, u] for u, v in rounded):
            kept.append(m)
    return InstanceMaskSet(kept, camera_id=masks.camera_id, image_size=image_size)


def union_mask(selected: InstanceMaskSet) -> np.ndarray:
    """Pixelwise OR of the masks; all-zero raster for an empty set."""
    if not selected.masks:
        if selected.image_size is None:
            raise DimensionMismatch("empty mask set carries no image size")
        return np.zeros(selected.image_size, dtype=bool)
    shape = selected.masks[0].shape
    for i, m in enumerate(selected.masks):
        if m.shape != shape:
            raise DimensionMismatch(f"mask {i} is {m.shape}, expected {shape}")
    out = np.zeros(shape, dtype=bool)
    for m in selected.masks:
        out |= m
    return out


def calibrate(
    rel: RelativeDepthRaster,
    sparse: SparseDepthRaster,
    foreground_mask: Optional[np.ndarray] = None,
) -> AffineDepthCalibration:
    """Closed-form least squares for Z = a * D_rel + b over LiDAR-valid pixels.

    When foreground_mask is given the fit is restricted to foreground
    pixels (default behavior of the pipeline); pass None to fit on every
    valid pixel.
    """
    if rel.shape != sparse.shape:
        raise DimensionMismatch(f"relative {rel.shape} vs sparse {sparse.shape}")
    pick = sparse.valid
    if foreground_mask is not None:
        fg = np.asarray(foreground_mask, dtype=bool)
        if fg.shape != rel.shape:
            raise DimensionMismatch(f"foreground mask {fg.shape} vs raster {rel.shape}")
        pick = pick & fg
    x = rel.values[pick]
    z = sparse.values[pick]
    if x.size < 2:
        raise DegenerateFit(f"only {x.size} fit pixels; need at least 2")
    x_mean = x.mean()
    z_mean = z.mean()
    var = ((x - x_mean) ** 2).sum()
    if var == 0.0:
        raise DegenerateFit("relative depth is constant over the fit pixels")
    a = float(((x - x_mean) * (z - z_mean)).sum() / var)
    b = float(z_mean - a * x_mean)
    rms = float(np.sqrt(np.mean((a * x + b - z) ** 2)))
    return AffineDepthCalibration(a=a, b=b, inlier_count=int(x.size), rms_error=rms)


def foreground_depth(
    rel: RelativeDepthRaster,
    calib: AffineDepthCalibration,
    mask: np.ndarray,
) -> ForegroundDepth:
    """Apply the affine calibration on masked pixels; +inf elsewhere."""
    m = np.asarray(mask, dtype=bool)
    if m.shape != rel.shape:
        raise DimensionMismatch(f"mask {m.shape} vs relative depth {rel.shape}")
    values = np.full(rel.shape, np.inf)
    calibrated = calib.a * rel.values[m] + calib.b
    clamped = int(np.count_nonzero(calibrated <= 0))
    if clamped:
        log.warning("clamped %d non-positive calibrated depths to %g m", clamped, MIN_DEPTH)
    values[m] = np.maximum(calibrated, MIN_DEPTH)
    return ForegroundDepth(values, m, clamped_count=clamped)


def depth_metrics(
    pred: np.ndarray,
    gt: SparseDepthRaster,
    eval_mask: Optional[np.ndarray] = None,
) -> Tuple[float, float]:
    """(MAE meters, REL unitless) over ground-truth pixels inside eval_mask."""
    p = _as_raster(pred, "prediction")
    if p.shape != gt.shape:
        raise DimensionMismatch(f"prediction {p.shape} vs ground truth {gt.shape}")
    pick = gt.valid.copy()
    if eval_mask is not None:
        em = np.asarray(eval_mask, dtype=bool)
        if em.shape != p.shape:
            raise DimensionMismatch(f"eval mask {em.shape} vs prediction {p.shape}")
        pick &= em
    if not pick.any():
        raise EmptyEvaluation("no ground-truth pixels inside the evaluation mask")
    err = np.abs(p[pick] - gt.values[pick])
    mae = float(err.mean())
    rel = float((err / gt.values[pick]).mean())
    return mae, rel
