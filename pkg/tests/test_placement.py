import math

import numpy as np
import pytest

from roadsim.errors import EmptyRig, InvariantViolation
from roadsim.geometry import (
    Box3D,
    CameraIntrinsics,
    CameraRig,
    RigCamera,
    look_at_extrinsics,
    point_in_view,
    project,
)
from roadsim.placement import (
    AssetSpec,
    CandidateScore,
    CheckResult,
    Placement,
    PlacementGrid,
    RejectReason,
    SamplerConfig,
    Source,
    check,
    dispersion_gain,
    dispersion_score,
    footprints_overlap,
    sample_placements,
    score_cells,
    visibility_score,
)

INTR = CameraIntrinsics(fx=500.0, fy=500.0, cx=320.0, cy=240.0, width=640, height=480)


def cam(camera_id, eye, target):
    return RigCamera(camera_id, INTR, look_at_extrinsics(eye, target))


def two_cam_rig(center=(0.0, 0.0, 0.8)):
    return CameraRig([
        cam("cam0", (0.0, -12.0, 6.0), center),
        cam("cam1", (0.0, 12.0, 6.0), center),
    ])


# --- independent rasterized footprint-overlap oracle (1 cm default) ---

def _rect_corners(box, dilate=0.0):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = box.length / 2 + dilate, box.width / 2 + dilate
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    world = local @ np.array([[c, s], [-s, c]])
    return world + box.center[:2]


def _inside(points, box, dilate=0.0):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    d = points - box.center[:2]
    local_x = d[:, 0] * c + d[:, 1] * s
    local_y = -d[:, 0] * s + d[:, 1] * c
    return (np.abs(local_x) <= box.length / 2 + dilate) & (np.abs(local_y) <= box.width / 2 + dilate)


def overlap_raster_oracle(a, b, res=0.01, dilate=0.0):
    """Footprints share ground area iff some res-spaced sample point is in both."""
    ca = _rect_corners(a, dilate)
    cb = _rect_corners(b, dilate)
    lo = np.maximum(ca.min(axis=0), cb.min(axis=0)) - res
    hi = np.minimum(ca.max(axis=0), cb.max(axis=0)) + res
    if np.any(lo >= hi):
        return False
    xs = np.arange(lo[0], hi[0], res)
    ys = np.arange(lo[1], hi[1], res)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return bool(np.any(_inside(pts, a, dilate) & _inside(pts, b, dilate)))


def ground_box(x, y, l=4.2, w=1.8, h=1.5, yaw=0.0):
    return Box3D(center=(x, y, h / 2), dims=(l, w, h), yaw=yaw)


class TestGrid:
    def test_invariants(self):
        with pytest.raises(InvariantViolation):
            PlacementGrid((0, 0), cell_size=0.0, nx=2, ny=2)
        with pytest.raises(InvariantViolation):
            PlacementGrid((0, 0), cell_size=1.0, nx=0, ny=2)
        with pytest.raises(InvariantViolation):
            PlacementGrid((0, 0), cell_size=1.0, nx=2, ny=2, seed_points=[(5.0, 0.0)])

    def test_cell_layout(self):
        g = PlacementGrid((10.0, 20.0), cell_size=2.0, nx=3, ny=2)
        assert g.n_cells == 6
        np.testing.assert_allclose(g.cell_center(0), (11.0, 21.0))
        np.testing.assert_allclose(g.cell_center(2), (15.0, 21.0))
        np.testing.assert_allclose(g.cell_center(3), (11.0, 23.0))
        np.testing.assert_allclose(g.cell_centers()[4], g.cell_center(4))

    def test_score_total_identity(self):
        with pytest.raises(InvariantViolation):
            CandidateScore(0, 1.0, 2.0, 4.0)
        CandidateScore(0, 1.0, 2.0, 3.0)
        CandidateScore(0, -math.inf, 2.0, -math.inf)


class TestVisibility:
    def test_empty_rig(self):
        with pytest.raises(EmptyRig):
            visibility_score((0, 0, 0), CameraRig([]))

    def test_one_camera_sees(self):
        rig = CameraRig([cam("c", (0, -12, 6), (0, 0, 0.8))])
        assert visibility_score((0, 0, 0.8), rig) == pytest.approx(1.0)

    def test_two_cameras_both_see(self):
        assert visibility_score((0, 0, 0.8), two_cam_rig()) == pytest.approx(2.0)

    def test_two_cameras_one_sees(self):
        # point far behind cam1 but in front of cam0
        rig = two_cam_rig()
        p = (0.0, -14.0, 0.8)
        seen = [1.0 if point_in_view(p, c.extrinsics, c.intrinsics) else 0.0 for c in rig]
        assert sum(seen) == 1.0
        assert visibility_score(p, rig) == pytest.approx(0.5)

    def test_nobody_sees(self):
        assert visibility_score((0, 0, 500.0), two_cam_rig()) == pytest.approx(0.0)


class TestDispersion:
    def test_single_point(self):
        assert dispersion_score([(3.0, 4.0)]) == 0.0

    def test_two_points_two_metres(self):
        assert dispersion_score([(0.0, 0.0), (2.0, 0.0)]) == pytest.approx(2.0)

    def test_three_collinear(self):
        assert dispersion_score([(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]) == pytest.approx(2.0)

    def test_translation_invariance(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            pts = rng.normal(0, 10, size=(rng.integers(1, 9), 2))
            offset = rng.normal(0, 100, size=2)
            assert dispersion_score(pts + offset) == pytest.approx(dispersion_score(pts), abs=1e-9)

    def test_gain_of_first_point_is_zero(self):
        assert dispersion_gain((1.0, 1.0), np.empty((0, 2))) == 0.0

    def test_adding_a_point_at_q_never_raises_gain_at_q(self):
        rng = np.random.default_rng(9)
        for _ in range(200):
            pts = rng.normal(0, 5, size=(rng.integers(1, 7), 2))
            q = rng.normal(0, 5, size=2)
            before = dispersion_gain(q, pts)
            after = dispersion_gain(q, np.vstack([pts, q[None, :]]))
            assert after <= before + 1e-9


class TestScoreCells:
    def test_mirror_symmetric_rig(self):
        g = PlacementGrid((-2.0, -2.0), 1.0, 4, 4, seed_points=[])
        g = PlacementGrid((-2.0, -2.0), 1.0, 4, 4, seed_points=g.cell_centers())
        rig = two_cam_rig(center=(0.0, 0.0, 0.8))
        scores = score_cells(g, rig, [])
        for iy in range(4):
            for ix in range(4):
                a = scores[iy * 4 + ix].total
                b = scores[(3 - iy) * 4 + ix].total
                assert a == pytest.approx(b, abs=1e-9)

    def test_gated_cells_are_minus_inf(self):
        g = PlacementGrid((0.0, 0.0), 2.0, 3, 1, seed_points=[(1.0, 1.0)])
        rig = two_cam_rig(center=(3.0, 1.0, 0.8))
        scores = score_cells(g, rig, [], SamplerConfig(r_seed=1.5))
        assert scores[0].total > -math.inf  # center (1,1) sits on the seed
        # centers (3,1) and (5,1) are 2 m and 4 m from the seed: both gated
        assert scores[1].total == -math.inf
        assert scores[2].total == -math.inf

    def test_out_of_frustum_scores_at_most_zero(self):
        g = PlacementGrid((-2.0, -2.0), 1.0, 4, 4)
        g = PlacementGrid((-2.0, -2.0), 1.0, 4, 4, seed_points=g.cell_centers())
        # cameras aimed far away from the grid: nothing is visible
        rig = CameraRig([cam("c0", (100, -12, 6), (100, 0, 0.8)), cam("c1", (100, 12, 6), (100, 0, 0.8))])
        for s in score_cells(g, rig, []):
            assert s.visibility_term <= 0.0

    def test_in_frustum_ranked_first(self):
        g = PlacementGrid((-4.0, -4.0), 2.0, 4, 4)
        g = PlacementGrid((-4.0, -4.0), 2.0, 4, 4, seed_points=g.cell_centers())
        # narrow offset rig: only cells near (3, 3) visible
        rig = CameraRig([cam("c0", (3.0, -8.0, 5.0), (3.0, 3.0, 0.8))])
        scores = score_cells(g, rig, [])
        best = max(scores, key=lambda s: s.total)
        assert best.visibility_term > 0.0

    def test_matches_brute_force(self):
        # independent re-evaluation of the full scoring rule on a 3x3 grid
        g = PlacementGrid(
            (-3.0, -3.0), 2.0, 3, 3,
            seed_points=[(-2.0, -2.0), (0.0, 0.0), (2.0, 2.0), (-2.0, 2.0), (2.2, -1.8)],
        )
        rig = two_cam_rig()
        existing = [
            Placement(ground_box(0.5, 0.3), "car_a", Source.REAL),
            Placement(ground_box(-1.5, 1.2, yaw=0.7), "car_b", Source.REAL),
        ]
        cfg = SamplerConfig(r_seed=2.0, default_asset_height=1.6)
        scores = score_cells(g, rig, existing, cfg)
        assert len(scores) == 9
        occupied = np.array([p.box.center[:2] for p in existing])

        def disp(pts):
            n = len(pts)
            total = 0.0
            for i in range(n):
                for j in range(n):
                    total += float(np.sum((pts[i] - pts[j]) ** 2))
            return total / (2 * n)

        for idx in range(9):
            iy, ix = divmod(idx, 3)
            center = np.array([-3.0 + (ix + 0.5) * 2.0, -3.0 + (iy + 0.5) * 2.0])
            s = scores[idx]
            assert s.cell_index == idx
            gain = disp(np.vstack([occupied, center[None]])) - disp(occupied)
            assert s.dispersion_term == pytest.approx(gain, abs=1e-9)
            seed_d = np.sqrt(((g.seed_points - center) ** 2).sum(axis=1)).min()
            if seed_d > 2.0:
                assert s.total == -math.inf
                continue
            probe = np.array([center[0], center[1], 0.8])
            vs = []
            for c in rig:
                px = project(probe, c.extrinsics, c.intrinsics)
                vs.append(1.0 if px and 0 <= px.u < 640 and 0 <= px.v < 480 else 0.0)
            avg = sum(vs) / 2
            vis = sum(vs) - sum((v - avg) ** 2 for v in vs)
            assert s.visibility_term == pytest.approx(vis, abs=1e-9)
            assert s.total == pytest.approx(vis + gain, abs=1e-9)


class TestChecker:
    def test_identical_box_rejected(self):
        rig = two_cam_rig()
        box = ground_box(0.0, 0.0)
        a = Placement(box, "x", Source.SIMULATED)
        b = Placement(ground_box(0.0, 0.0), "y", Source.REAL)
        result = check(a, [b], rig)
        assert not result
        assert result.reason is RejectReason.OVERLAP

    def test_ten_metres_apart_accepted(self):
        rig = two_cam_rig()
        rng = np.random.default_rng(2)
        for _ in range(20):
            yaw_a, yaw_b = rng.uniform(-np.pi, np.pi, 2)
            a = Placement(ground_box(0.0, 0.0, 4.0, 2.0, yaw=yaw_a), "a", Source.SIMULATED)
            b = Placement(ground_box(10.0, 0.0, 4.0, 2.0, yaw=yaw_b), "b", Source.REAL)
            # candidate may be out of this rig's view; use a rig that sees it
            local_rig = CameraRig([cam("c", (0, -12, 6), (0, 0, 0.8))])
            assert check(a, [b], local_rig).accepted

    def test_corner_overlap_rejected(self):
        # 4x2 boxes, second at 45 deg placed to clip ~0.1 m of the corner
        a_box = ground_box(0.0, 0.0, 4.0, 2.0, yaw=0.0)
        b_box = ground_box(2.6, 1.6, 4.0, 2.0, yaw=np.pi / 4)
        assert overlap_raster_oracle(a_box, b_box)  # oracle confirms real overlap
        rig = two_cam_rig()
        result = check(Placement(b_box, "b", Source.SIMULATED), [Placement(a_box, "a", Source.REAL)], rig)
        assert result.reason is RejectReason.OVERLAP

    def test_vertical_separation_accepts(self):
        rig = CameraRig([cam("c", (0, -12, 6), (0, 0, 2.0))])
        low = Placement(ground_box(0.0, 0.0), "low", Source.REAL)
        high_box = Box3D(center=(0.0, 0.0, 4.0), dims=(4.2, 1.8, 1.5), yaw=0.3)
        assert check(Placement(high_box, "high", Source.SIMULATED), [low], rig).accepted

    def test_invisible_rejected(self):
        # cameras aimed away; nothing overlaps
        rig = CameraRig([cam("c", (0, -12, 6), (0, -24, 0.8))])
        result = check(Placement(ground_box(0.0, 5.0), "x", Source.SIMULATED), [], rig)
        assert result.reason is RejectReason.INVISIBLE

    def test_overlap_reported_before_invisible(self):
        rig = CameraRig([cam("c", (0, -12, 6), (0, -24, 0.8))])
        a = Placement(ground_box(0.0, 5.0), "x", Source.SIMULATED)
        b = Placement(ground_box(0.0, 5.0), "y", Source.REAL)
        assert check(a, [b], rig).reason is RejectReason.OVERLAP

    def test_sat_agrees_with_raster_oracle(self):
        rng = np.random.default_rng(20260814)
        n_overlap = 0
        for _ in range(10_000):
            cx, cy = rng.uniform(-2, 2, 2)
            dx, dy = rng.uniform(-2, 2, 2)
            la, wa, lb, wb = rng.uniform(0.3, 2.5, 4)
            ya, yb = rng.uniform(-np.pi, np.pi, 2)
            a = ground_box(cx, cy, la, wa, yaw=ya)
            b = ground_box(dx, dy, lb, wb, yaw=yb)
            sat = footprints_overlap(a, b)
            oracle = overlap_raster_oracle(a, b)
            if oracle:
                n_overlap += 1
                # a real shared point must never slip through
                assert sat, f"false accept: {a} vs {b}"
            elif sat:
                # only permissible when within 1 cm of tangency
                assert overlap_raster_oracle(a, b, dilate=0.01), f"false reject: {a} vs {b}"
        assert n_overlap > 100  # the sample actually exercises both branches


class TestSampler:
    def open_grid(self):
        rng = np.random.default_rng(77)
        seeds = rng.uniform(-9.0, 9.0, size=(40, 2))
        return PlacementGrid((-10.0, -10.0), 2.0, 10, 10, ground_z=0.0, seed_points=seeds)

    def catalog(self):
        return [
            AssetSpec("sedan", (4.4, 1.8, 1.5), class_id=0),
            AssetSpec("suv", (4.8, 2.0, 1.8), class_id=0),
            AssetSpec("van", (5.2, 2.1, 2.2), class_id=1),
        ]

    def wide_rig(self):
        return CameraRig([
            cam("cam0", (-14.0, -14.0, 8.0), (0.0, 0.0, 1.0)),
            cam("cam1", (14.0, 14.0, 8.0), (0.0, 0.0, 1.0)),
        ])

    def test_zero_requested(self):
        assert sample_placements(self.open_grid(), self.wide_rig(), [], 0, self.catalog(), 1) == []

    def test_saturated_scene_returns_empty(self):
        g = PlacementGrid((-2.0, -2.0), 2.0, 2, 2, seed_points=[(0.0, 0.0)])
        blocker = Placement(ground_box(0.0, 0.0, 20.0, 20.0, h=3.0), "wall", Source.REAL)
        out = sample_placements(g, self.wide_rig(), [blocker], 5, self.catalog(), 3)
        assert out == []

    def test_open_grid_placements_all_valid(self):
        g, rig, cat = self.open_grid(), self.wide_rig(), self.catalog()
        # the sampler may stop short when the favored cells saturate;
        # this seed is known to place the full request
        out = sample_placements(g, rig, [], 10, cat, rng_seed=4)
        assert len(out) == 10
        ids = {a.asset_id for a in cat}
        for i, p in enumerate(out):
            assert p.source is Source.SIMULATED
            assert p.asset_id in ids
            assert p.box.center[2] == pytest.approx(p.box.height / 2)
            assert -np.pi < p.box.yaw <= np.pi
            others = out[:i] + out[i + 1:]
            assert check(p, others, rig).accepted
        for i in range(len(out)):
            for j in range(i + 1, len(out)):
                assert not overlap_raster_oracle(out[i].box, out[j].box)

    def test_determinism(self):
        g, rig, cat = self.open_grid(), self.wide_rig(), self.catalog()

        def snapshot(placements):
            return [
                (p.asset_id, p.box.center.tobytes(), p.box.dims.tobytes(), p.box.yaw)
                for p in placements
            ]

        a = snapshot(sample_placements(g, rig, [], 6, cat, rng_seed=9))
        b = snapshot(sample_placements(g, rig, [], 6, cat, rng_seed=9))
        c = snapshot(sample_placements(g, rig, [], 6, cat, rng_seed=10))
        assert a == b
        assert a != c

    def test_yaw_choices_config(self):
        g, rig, cat = self.open_grid(), self.wide_rig(), self.catalog()
        cfg = SamplerConfig(yaw_choices=(0.25, -2.0))
        out = sample_placements(g, rig, [], 8, cat, rng_seed=4, config=cfg)
        assert out
        assert all(p.box.yaw in (0.25, -2.0) for p in out)

    def test_existing_respected(self):
        g, rig, cat = self.open_grid(), self.wide_rig(), self.catalog()
        existing = [Placement(ground_box(x, y), f"r{x}{y}", Source.REAL) for x in (-5.0, 5.0) for y in (-5.0, 5.0)]
        out = sample_placements(g, rig, existing, 6, cat, rng_seed=21)
        for p in out:
            for e in existing:
                assert not overlap_raster_oracle(p.box, e.box)

    def test_greedy_close_to_exhaustive(self):
        # tiny grid so the visibility term dominates any within-cell jitter
        g = PlacementGrid((0.0, 0.0), 0.25, 4, 4)
        g = PlacementGrid((0.0, 0.0), 0.25, 4, 4, seed_points=g.cell_centers())
        rig = CameraRig([
            cam("c0", (0.5, -2.0, 1.2), (0.5, 0.5, 0.2)),
            cam("c1", (0.5, 3.0, 1.2), (0.5, 0.5, 0.2)),
        ])
        cat = [AssetSpec("prop", (0.3, 0.2, 0.4))]
        cfg = SamplerConfig(top_k=1, default_asset_height=0.4)
        probe_z = 0.2

        def objective(xy_points):
            vis = sum(visibility_score((x, y, probe_z), rig) for x, y in xy_points)
            return vis + dispersion_score(np.asarray(xy_points))

        centers = g.cell_centers()
        best = -math.inf
        for i in range(len(centers)):
            for j in range(i + 1, len(centers)):
                best = max(best, objective([centers[i], centers[j]]))
        for seed in range(5):
            out = sample_placements(g, rig, [], 2, cat, rng_seed=seed, config=cfg)
            assert len(out) == 2
            val = objective([p.box.center[:2] for p in out])
            assert val >= 0.9 * best
