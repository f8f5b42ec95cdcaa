"""Multi-view occlusion-aware placement sampling.

Scores ground-plane grid cells by how many cameras see them (minus a
variance penalty that favors positions visible from several views at
once) plus the marginal gain in pairwise dispersion, then greedily
samples vehicle placements from the best cells. A rule-based checker
rejects candidates that collide with existing objects or are invisible
from every camera.

Cells with no nearby historical object position are gated out entirely:
real traffic only ever appeared in some parts of the scene, and
placements outside those parts tend to be implausible (sidewalks,
buildings).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from .errors import EmptyRig, InvariantViolation
from .geometry import Box3D, CameraRig, normalize_yaw, point_in_view


@dataclass(frozen=True, eq=False)
class PlacementGrid:
    """Regular XY grid of candidate cells on the ground plane.

    Cell (ix, iy) spans origin + [ix, ix+1) * cell_size by [iy, iy+1) *
    cell_size; flat indices are row-major, idx = iy * nx + ix.
    """

    origin: np.ndarray  # world XY of the min corner
    cell_size: float
    nx: int
    ny: int
    ground_z: float
    seed_points: np.ndarray  # (S, 2) world XY where real objects appeared

    def __init__(self, origin, cell_size, nx, ny, ground_z=0.0, seed_points=()):
        o = np.array(origin, dtype=float).reshape(-1)
        if o.shape != (2,):
            raise InvariantViolation("origin must be a 2-vector")
        if not cell_size > 0:
            raise InvariantViolation(f"cell_size must be positive, got {cell_size}")
        if nx < 1 or ny < 1:
            raise InvariantViolation(f"grid needs at least one cell, got {nx}x{ny}")
        seeds = np.asarray(list(seed_points), dtype=float).reshape(-1, 2) if len(seed_points) else np.empty((0, 2))
        hi = o + np.array([nx * cell_size, ny * cell_size])
        if seeds.size and not (np.all(seeds >= o) and np.all(seeds <= hi)):
            raise InvariantViolation("every seed point must lie inside the grid extent")
        o.flags.writeable = False
        seeds.flags.writeable = False
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "cell_size", float(cell_size))
        object.__setattr__(self, "nx", int(nx))
        object.__setattr__(self, "ny", int(ny))
        object.__setattr__(self, "ground_z", float(ground_z))
        object.__setattr__(self, "seed_points", seeds)

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    def cell_center(self, index: int) -> np.ndarray:
        if not 0 <= index < self.n_cells:
            raise InvariantViolation(f"cell index {index} out of range [0, {self.n_cells})")
        iy, ix = divmod(index, self.nx)
        return self.origin + (np.array([ix, iy]) + 0.5) * self.cell_size

    def cell_centers(self) -> np.ndarray:
        """(n_cells, 2) array of all centers, ordered by flat index."""
        ix, iy = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        grid = np.stack([ix.ravel(), iy.ravel()], axis=1) + 0.5
        return self.origin + grid * self.cell_size


@dataclass(frozen=True)
class CandidateScore:
    cell_index: int
    visibility_term: float
    dispersion_term: float
    total: float

    def __post_init__(self):
        expect = self.visibility_term + self.dispersion_term
        if math.isfinite(expect):
            if abs(self.total - expect) > 1e-12:
                raise InvariantViolation("total must equal visibility_term + dispersion_term")
        elif self.total != expect:
            raise InvariantViolation("total must equal visibility_term + dispersion_term")


class Source(enum.Enum):
    REAL = "real"
    SIMULATED = "simulated"


@dataclass(frozen=True)
class Placement:
    box: Box3D
    asset_id: str
    source: Source


class RejectReason(enum.Enum):
    OVERLAP = "overlap"
    INVISIBLE = "invisible"


@dataclass(frozen=True)
class CheckResult:
    accepted: bool
    reason: Optional[RejectReason] = None

    def __bool__(self) -> bool:
        return self.accepted


@dataclass(frozen=True)
class AssetSpec:
    """What the sampler needs to know about one asset: id, box dims, class."""

    asset_id: str
    dims: tuple  # (length, width, height) meters
    class_id: int = 0


@dataclass(frozen=True)
class SamplerConfig:
    top_k: int = 5
    max_retries: int = 50
    r_seed: float = 3.0  # gate radius around historical object positions
    default_asset_height: float = 1.6  # visibility probe height for scoring
    yaw_choices: Optional[Sequence[float]] = None  # e.g. lane directions; None = uniform


def visibility_score(p, rig: CameraRig) -> float:
    """Camera-count visibility minus the squared deviation from the mean.

    Positions seen by every camera score highest; a position seen by one
    of many cameras is penalized for uneven coverage.
    """
    if len(rig) == 0:
        raise EmptyRig("visibility needs at least one camera")
    v = np.array([1.0 if point_in_view(p, c.extrinsics, c.intrinsics) else 0.0 for c in rig])
    avg = v.sum() / len(v)
    return float(v.sum() - ((v - avg) ** 2).sum())


def dispersion_score(points) -> float:
    """Mean pairwise squared distance, ordered pairs over 2|P|."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    if len(pts) == 0:
        raise InvariantViolation("dispersion needs at least one point")
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
    return float(d2.sum() / (2.0 * len(pts)))


def dispersion_gain(q, points) -> float:
    """Increase in dispersion_score from adding q to the set (0 for an empty set)."""
    pts = np.asarray(points, dtype=float).reshape(-1, np.size(q))
    if len(pts) == 0:
        return 0.0
    extended = np.vstack([pts, np.asarray(q, dtype=float)[None, :]])
    return dispersion_score(extended) - dispersion_score(pts)


def _placement_xy(placements: Sequence[Placement]) -> np.ndarray:
    return np.array([p.box.center[:2] for p in placements]).reshape(-1, 2)


def score_cells(
    grid: PlacementGrid,
    rig: CameraRig,
    existing: Sequence[Placement],
    config: Optional[SamplerConfig] = None,
) -> List[CandidateScore]:
    """Score every cell; gated cells (no seed point within r_seed) get -inf.

    The gate is expressed through the visibility term so the reported
    total stays the sum of the two terms.
    """
    cfg = config or SamplerConfig()
    centers = grid.cell_centers()
    if len(grid.seed_points):
        d2 = ((centers[:, None, :] - grid.seed_points[None, :, :]) ** 2).sum(axis=-1)
        gated = d2.min(axis=1) > cfg.r_seed**2
    else:
        gated = np.ones(len(centers), dtype=bool)
    occupied = _placement_xy(existing)
    probe_z = grid.ground_z + 0.5 * cfg.default_asset_height
    out = []
    for idx in range(grid.n_cells):
        disp = dispersion_gain(centers[idx], occupied)
        if gated[idx]:
            out.append(CandidateScore(idx, -math.inf, disp, -math.inf))
            continue
        vis = visibility_score(np.array([centers[idx][0], centers[idx][1], probe_z]), rig)
        out.append(CandidateScore(idx, vis, disp, vis + disp))
    return out


def _footprint(box: Box3D):
    """(center XY, half-extents, unit axes) of the ground-plane rectangle."""
    c = box.center[:2]
    half = np.array([box.length, box.width]) / 2.0
    ca, sa = np.cos(box.yaw), np.sin(box.yaw)
    axes = np.array([[ca, sa], [-sa, ca]])  # rows: local x and y in world
    return c, half, axes


def footprints_overlap(a: Box3D, b: Box3D) -> bool:
    """Separating-axis test between two yawed ground rectangles.

    Touching edges (zero-area intersection) count as non-overlapping.
    """
    ca, ha, axes_a = _footprint(a)
    cb, hb, axes_b = _footprint(b)
    d = cb - ca
    for axis in np.vstack([axes_a, axes_b]):
        ra = ha @ np.abs(axes_a @ axis)
        rb = hb @ np.abs(axes_b @ axis)
        if abs(d @ axis) >= ra + rb:
            return False
    return True


def _vertical_overlap(a: Box3D, b: Box3D) -> bool:
    a_lo, a_hi = a.center[2] - a.height / 2, a.center[2] + a.height / 2
    b_lo, b_hi = b.center[2] - b.height / 2, b.center[2] + b.height / 2
    return min(a_hi, b_hi) > max(a_lo, b_lo)


def check(candidate: Placement, existing: Sequence[Placement], rig: CameraRig) -> CheckResult:
    """Physical-validity gate: reject collisions, then invisibility."""
    for other in existing:
        if footprints_overlap(candidate.box, other.box) and _vertical_overlap(candidate.box, other.box):
            return CheckResult(False, RejectReason.OVERLAP)
    if not any(point_in_view(candidate.box.center, c.extrinsics, c.intrinsics) for c in rig):
        return CheckResult(False, RejectReason.INVISIBLE)
    return CheckResult(True)


def sample_placements(
    grid: PlacementGrid,
    rig: CameraRig,
    existing: Sequence[Placement],
    n_requested: int,
    asset_catalog: Sequence[AssetSpec],
    rng_seed: int,
    config: Optional[SamplerConfig] = None,
    stats: Optional[dict] = None,
) -> List[Placement]:
    """Greedy placement loop; each accepted placement conditions the next round.

    Stops early (short output) once max_retries consecutive candidates
    are rejected, which signals a saturated scene. When `stats` is given,
    rejection counts are accumulated into it keyed by RejectReason name.
    """
    if n_requested < 0:
        raise InvariantViolation(f"n_requested must be >= 0, got {n_requested}")
    if n_requested and not asset_catalog:
        raise InvariantViolation("asset catalog is empty")
    cfg = config or SamplerConfig()
    rng = np.random.default_rng(rng_seed)
    placed: List[Placement] = []
    while len(placed) < n_requested:
        scores = score_cells(grid, rig, list(existing) + placed, cfg)
        ranked = sorted((s for s in scores if math.isfinite(s.total)), key=lambda s: -s.total)
        top = ranked[: cfg.top_k]
        if not top:
            break
        accepted = None
        for _ in range(cfg.max_retries):
            cell = top[int(rng.integers(len(top)))]
            base = grid.origin + np.array(divmod(cell.cell_index, grid.nx))[::-1] * grid.cell_size
            xy = base + rng.uniform(0.0, grid.cell_size, size=2)
            if cfg.yaw_choices is not None:
                yaw = float(cfg.yaw_choices[int(rng.integers(len(cfg.yaw_choices)))])
            else:
                yaw = normalize_yaw(rng.uniform(0.0, 2.0 * np.pi))
            asset = asset_catalog[int(rng.integers(len(asset_catalog)))]
            box = Box3D(
                center=(xy[0], xy[1], grid.ground_z + asset.dims[2] / 2.0),
                dims=asset.dims,
                yaw=yaw,
                class_id=asset.class_id,
            )
            candidate = Placement(box=box, asset_id=asset.asset_id, source=Source.SIMULATED)
            result = check(candidate, list(existing) + placed, rig)
            if result:
                accepted = candidate
                break
            if stats is not None and result.reason is not None:
                stats[result.reason.name] = stats.get(result.reason.name, 0) + 1
        if accepted is None:
            break
        placed.append(accepted)
    return placed
