"""Post-processing chain tests."""

import sys

import numpy as np
import pytest

from roadsim.errors import ConfigError, InvariantViolation, StageFailure, UnknownStage
from roadsim.geometry import Box3D, CameraIntrinsics, look_at_extrinsics
from roadsim.placement import Placement, Source
from roadsim.postfx import (
    ChainContext,
    PostStage,
    apply_chain,
    registered_stages,
    stages_from_config,
)

INTR = CameraIntrinsics(fx=600.0, fy=600.0, cx=320.0, cy=240.0, width=640, height=480)


def sample_image(seed=0, shape=(120, 160, 3)):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=shape, dtype=np.uint8)


class TestChainMechanics:
    def test_empty_chain_identity(self):
        img = sample_image()
        out = apply_chain(img, [])
        assert out.tobytes() == img.tobytes()
        assert out is not img  # callers own the result

    def test_unknown_stage_fails_before_running_anything(self, tmp_path):
        sentinel = tmp_path / "ran"
        script = f"import pathlib,shutil,sys; pathlib.Path({str(sentinel)!r}).touch(); shutil.copy(sys.argv[1], sys.argv[2])"
        chain = [
            PostStage("external", {"argv": [sys.executable, "-c", script, "{input}", "{output}"]}),
            PostStage("definitely_not_registered"),
        ]
        with pytest.raises(UnknownStage, match="definitely_not_registered"):
            apply_chain(sample_image(), chain)
        assert not sentinel.exists()

    def test_left_fold_order(self):
        img = np.full((4, 4, 3), 100, dtype=np.uint8)
        b_then_c = apply_chain(img, [PostStage("brightness", {"offset": 50}),
                                     PostStage("contrast", {"factor": 2.0})])
        c_then_b = apply_chain(img, [PostStage("contrast", {"factor": 2.0}),
                                     PostStage("brightness", {"offset": 50})])
        # (100+50-128)*2+128 = 172 vs (100-128)*2+128+50 = 122
        assert b_then_c[0, 0, 0] == 172
        assert c_then_b[0, 0, 0] == 122

    def test_bad_image_rejected(self):
        with pytest.raises(InvariantViolation):
            apply_chain(np.zeros((4, 4), dtype=np.uint8), [])
        with pytest.raises(InvariantViolation):
            apply_chain(np.zeros((4, 4, 3), dtype=np.float32), [])

    def test_stages_from_config(self):
        stages = stages_from_config([{"name": "gamma", "gamma": 2.0}, {"name": "rain"}])
        assert [s.name for s in stages] == ["gamma", "rain"]
        assert stages[0].params == {"gamma": 2.0}
        with pytest.raises(ConfigError):
            stages_from_config([{"gamma": 2.0}])

    def test_dimension_preservation_all_builtin(self):
        img = sample_image(1)
        ctx = ChainContext(
            placements=(Placement(Box3D((8.0, 0.0, 0.75), (4.0, 1.8, 1.5), 0.4),
                                  "car", Source.SIMULATED),),
            coverage=np.zeros(img.shape[:2], dtype=bool),
            extr=look_at_extrinsics((-10.0, -5.0, 4.0), (8.0, 0.0, 0.0)),
            intr=CameraIntrinsics(fx=200.0, fy=200.0, cx=80.0, cy=60.0, width=160, height=120),
        )
        for name in registered_stages():
            if name == "external":
                continue
            out = apply_chain(img, [PostStage(name)], context=ctx)
            assert out.shape == img.shape and out.dtype == np.uint8, name


class TestToneStages:
    def test_gamma_one_is_identity(self):
        img = sample_image(2)
        out = apply_chain(img, [PostStage("gamma", {"gamma": 1.0})])
        assert out.tobytes() == img.tobytes()

    def test_gamma_direction(self):
        img = np.full((8, 8, 3), 64, dtype=np.uint8)
        dark = apply_chain(img, [PostStage("gamma", {"gamma": 2.2})])
        bright = apply_chain(img, [PostStage("gamma", {"gamma": 0.45})])
        assert dark[0, 0, 0] < 64 < bright[0, 0, 0]

    def test_brightness_inverse_pair_outside_clipping(self):
        img = sample_image(3)
        out = apply_chain(img, [PostStage("brightness", {"offset": 20}),
                                PostStage("brightness", {"offset": -20})])
        safe = (img >= 20) & (img <= 235)
        np.testing.assert_array_equal(out[safe], img[safe])

    def test_contrast_pivot_fixed_point(self):
        img = np.full((4, 4, 3), 128, dtype=np.uint8)
        out = apply_chain(img, [PostStage("contrast", {"factor": 3.0})])
        assert out[0, 0, 0] == 128

    def test_color_temperature(self):
        img = sample_image(4)
        same = apply_chain(img, [PostStage("color_temperature", {"shift": 0.0})])
        assert same.tobytes() == img.tobytes()
        warm = apply_chain(img, [PostStage("color_temperature", {"shift": 0.8})])
        assert warm[..., 0].mean() > img[..., 0].mean()
        assert warm[..., 2].mean() < img[..., 2].mean()
        assert warm[..., 1].mean() == pytest.approx(img[..., 1].mean(), abs=0.51)

    def test_parameter_validation(self):
        with pytest.raises(ConfigError):
            apply_chain(sample_image(), [PostStage("gamma", {"gamma": -1.0})])
        with pytest.raises(ConfigError):
            apply_chain(sample_image(), [PostStage("brightness", {"offset": "a lot"})])


class TestNight:
    def test_zero_strength_identity(self):
        img = sample_image(5)
        out = apply_chain(img, [PostStage("night", {"strength": 0.0})])
        assert out.tobytes() == img.tobytes()

    def test_darkens_but_keeps_highlights(self):
        img = np.full((64, 64, 3), 120, dtype=np.uint8)
        img[10, 10] = 255  # a street lamp
        out = apply_chain(img, [PostStage("night", {"strength": 0.7})])
        assert out.astype(float).mean() < img.astype(float).mean() * 0.6
        np.testing.assert_array_equal(out[10, 10], img[10, 10])

    def test_vignette_center_brighter(self):
        img = np.full((80, 80, 3), 150, dtype=np.uint8)
        out = apply_chain(img, [PostStage("night", {"strength": 0.8, "sigma": 0.3})]).astype(float)
        assert out[40, 40].mean() > out[2, 2].mean()


class TestRain:
    def test_seed_reproducible(self):
        img = sample_image(6)
        a = apply_chain(img, [PostStage("rain", {"seed": 9})])
        b = apply_chain(img, [PostStage("rain", {"seed": 9})])
        c = apply_chain(img, [PostStage("rain", {"seed": 10})])
        assert a.tobytes() == b.tobytes()
        assert a.tobytes() != c.tobytes()

    def test_adds_streaks(self):
        img = np.zeros((100, 100, 3), dtype=np.uint8)
        out = apply_chain(img, [PostStage("rain", {"seed": 1, "density": 10.0})])
        lit = (out > 0).any(axis=2)
        assert lit.sum() > 100  # 10 streaks of length 18, minus off-canvas ends
        assert lit.sum() < lit.size // 2  # streaks, not a flood

    def test_zero_density_identity(self):
        img = sample_image(7)
        out = apply_chain(img, [PostStage("rain", {"seed": 1, "density": 0.0})])
        assert out.tobytes() == img.tobytes()


class TestGroundShadow:
    def make_context(self, coverage=None):
        box = Box3D((8.0, 0.0, 0.75), (4.0, 1.8, 1.5), 0.3)
        return box, ChainContext(
            placements=(Placement(box, "car", Source.SIMULATED),),
            coverage=coverage,
            extr=look_at_extrinsics((-8.0, -6.0, 5.0), (8.0, 0.0, 0.0)),
            intr=INTR,
        )

    def test_requires_context(self):
        with pytest.raises(StageFailure):
            apply_chain(sample_image(), [PostStage("ground_shadow")])

    def test_darkens_ground_not_asset(self):
        img = np.full((INTR.height, INTR.width, 3), 140, dtype=np.uint8)
        coverage = np.zeros(img.shape[:2], dtype=bool)
        coverage[200:240, 300:360] = True
        box, ctx = self.make_context(coverage=coverage)
        out = apply_chain(img, [PostStage("ground_shadow", {"opacity": 0.6})], context=ctx)
        darkened = (out.astype(int) < img.astype(int)).any(axis=2)
        assert darkened.sum() > 500
        assert not darkened[coverage].any()


class TestExternal:
    def test_round_trip_through_command(self):
        img = sample_image(8)
        copy_cmd = [sys.executable, "-c",
                    "import shutil,sys; shutil.copy(sys.argv[1], sys.argv[2])",
                    "{input}", "{output}"]
        out = apply_chain(img, [PostStage("external", {"argv": copy_cmd},
                                          deterministic=False)])
        assert out.tobytes() == img.tobytes()

    def test_failing_command(self):
        bad = [sys.executable, "-c", "import sys; sys.exit(3)"]
        with pytest.raises(StageFailure, match="exited 3"):
            apply_chain(sample_image(), [PostStage("external", {"argv": bad})])

    def test_missing_output(self):
        noop = [sys.executable, "-c", "pass"]
        with pytest.raises(StageFailure, match="no output"):
            apply_chain(sample_image(), [PostStage("external", {"argv": noop})])

    def test_argv_validated(self):
        with pytest.raises(ConfigError):
            apply_chain(sample_image(), [PostStage("external", {"argv": []})])
