"""Post-compositing image transforms, composable as an ordered chain.

Stages are looked up in a registry by name and configured from plain
dicts, so chains come straight out of the pipeline config. Every stage
maps an HxWx3 uint8 image to a new image of the same shape; seeded
stochastic stages (rain) re-seed per call and are therefore pure.

Heavier restyling (neural night/weather transfer) plugs in through the
`external` stage, which round-trips the image through files and an
arbitrary command; nothing in-process assumes more than that contract.
"""

from __future__ import annotations

import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from .errors import ConfigError, InvariantViolation, StageFailure, UnknownStage
from .geometry import project_points

StageFn = Callable[[np.ndarray, Optional["ChainContext"]], np.ndarray]


@dataclass(frozen=True)
class PostStage:
    """A named, configured transform; `deterministic` marks pure stages."""

    name: str
    params: Mapping = field(default_factory=dict)
    deterministic: bool = True


@dataclass(frozen=True)
class ChainContext:
    """Render byproducts some stages consume (all optional)."""

    placements: tuple = ()
    coverage: Optional[np.ndarray] = None
    extr: object = None
    intr: object = None


_REGISTRY: Dict[str, Callable[[Mapping], StageFn]] = {}


def register_stage(name: str):
    def decorate(factory):
        _REGISTRY[name] = factory
        return factory
    return decorate


def registered_stages() -> List[str]:
    return sorted(_REGISTRY)


def resolve(stage: PostStage) -> StageFn:
    factory = _REGISTRY.get(stage.name)
    if factory is None:
        raise UnknownStage(f"no stage named {stage.name!r}; known: {registered_stages()}")
    return factory(stage.params)


def stages_from_config(chain: Sequence[Mapping]) -> List[PostStage]:
    """Turn config dicts ({'name': ..., other keys as params}) into stages."""
    stages = []
    for i, entry in enumerate(chain):
        if "name" not in entry:
            raise ConfigError(f"post chain entry {i} has no 'name'")
        params = {k: v for k, v in entry.items() if k != "name"}
        stages.append(PostStage(name=str(entry["name"]), params=params))
    return stages


def apply_chain(image: np.ndarray, stages: Sequence[PostStage],
                context: Optional[ChainContext] = None) -> np.ndarray:
    """Left fold of the stages over the image; resolves every stage first."""
    fns = [resolve(stage) for stage in stages]  # fail before touching pixels
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise InvariantViolation(f"image must be HxWx3 uint8, got {img.shape} {img.dtype}")
    out = img.copy()
    for stage, fn in zip(stages, fns):
        result = np.asarray(fn(out, context))
        if result.shape != img.shape or result.dtype != np.uint8:
            raise InvariantViolation(
                f"stage {stage.name!r} returned {result.shape} {result.dtype}, "
                f"expected {img.shape} uint8"
            )
        out = result
    return out


def _require_float(params: Mapping, key: str, default: float,
                   lo: float = -np.inf, hi: float = np.inf) -> float:
    try:
        value = float(params.get(key, default))
    except (TypeError, ValueError):
        raise ConfigError(f"parameter {key!r} must be a number, got {params.get(key)!r}")
    if not lo <= value <= hi:
        raise ConfigError(f"parameter {key!r}={value} outside [{lo}, {hi}]")
    return value


def _to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


@register_stage("brightness")
def _brightness(params: Mapping) -> StageFn:
    offset = _require_float(params, "offset", 0.0, -255.0, 255.0)

    def fn(img, ctx):
        return _to_uint8(img.astype(np.float64) + offset)

    return fn


@register_stage("contrast")
def _contrast(params: Mapping) -> StageFn:
    factor = _require_float(params, "factor", 1.0, 0.0, 10.0)
    pivot = _require_float(params, "pivot", 128.0, 0.0, 255.0)

    def fn(img, ctx):
        return _to_uint8((img.astype(np.float64) - pivot) * factor + pivot)

    return fn


@register_stage("gamma")
def _gamma(params: Mapping) -> StageFn:
    gamma = _require_float(params, "gamma", 1.0, 0.05, 20.0)
    lut = _to_uint8(255.0 * (np.arange(256) / 255.0) ** gamma)

    def fn(img, ctx):
        return lut[img]

    return fn


@register_stage("color_temperature")
def _color_temperature(params: Mapping) -> StageFn:
    # shift > 0 warms (red up, blue down), shift < 0 cools; 0 is identity
    shift = _require_float(params, "shift", 0.0, -1.0, 1.0)
    gains = np.array([1.0 + 0.25 * shift, 1.0, 1.0 - 0.25 * shift])

    def fn(img, ctx):
        return _to_uint8(img.astype(np.float64) * gains)

    return fn


@register_stage("night")
def _night(params: Mapping) -> StageFn:
    strength = _require_float(params, "strength", 0.5, 0.0, 1.0)
    sigma = _require_float(params, "sigma", 0.5, 0.05, 4.0)
    threshold = _require_float(params, "threshold", 200.0, 1.0, 255.0)

    def fn(img, ctx):
        h, w = img.shape[:2]
        yy, xx = np.mgrid[0:h, 0:w]
        r2 = (((xx - w / 2.0) / (sigma * w)) ** 2 + ((yy - h / 2.0) / (sigma * h)) ** 2)
        vignette = np.exp(-r2 / 2.0)
        base = 1.0 - strength
        scale = base + (1.0 - base) * 0.35 * vignette
        lum = img.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
        highlight = np.clip((lum - threshold) / (255.0 - threshold), 0.0, 1.0)
        final = scale * (1.0 - highlight) + highlight
        return _to_uint8(img.astype(np.float64) * final[..., None])

    return fn


@register_stage("rain")
def _rain(params: Mapping) -> StageFn:
    seed = int(_require_float(params, "seed", 0.0))
    density = _require_float(params, "density", 0.6, 0.0, 50.0)  # streaks per 10k px
    length = int(_require_float(params, "length", 18.0, 1.0, 500.0))
    angle_deg = _require_float(params, "angle_deg", 12.0, -80.0, 80.0)  # tilt from vertical
    gain = _require_float(params, "gain", 55.0, 0.0, 255.0)

    def fn(img, ctx):
        h, w = img.shape[:2]
        rng = np.random.default_rng(seed)  # re-seeded per call: pure for fixed params
        n = int(density * h * w / 10_000.0)
        if n == 0:
            return img.copy()
        x0 = rng.uniform(0.0, w, size=n)
        y0 = rng.uniform(-length, h, size=n)
        dx, dy = np.sin(np.deg2rad(angle_deg)), np.cos(np.deg2rad(angle_deg))
        steps = np.arange(length)
        xs = np.rint(x0[:, None] + steps * dx).astype(np.int64).ravel()
        ys = np.rint(y0[:, None] + steps * dy).astype(np.int64).ravel()
        fade = np.tile(1.0 - steps / length, n)
        inside = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        overlay = np.zeros((h, w))
        np.add.at(overlay, (ys[inside], xs[inside]), fade[inside])
        overlay = np.minimum(overlay, 1.0) * gain
        return _to_uint8(img.astype(np.float64) + overlay[..., None])

    return fn


@register_stage("ground_shadow")
def _ground_shadow(params: Mapping) -> StageFn:
    opacity = _require_float(params, "opacity", 0.45, 0.0, 1.0)
    scale = _require_float(params, "scale", 1.25, 0.1, 5.0)

    def fn(img, ctx):
        if ctx is None or ctx.extr is None or ctx.intr is None:
            raise StageFailure("ground_shadow needs a render context (extr, intr, placements)")
        h, w = img.shape[:2]
        canvas = Image.new("L", (w, h), 0)
        draw = ImageDraw.Draw(canvas)
        angles = np.linspace(0.0, 2.0 * np.pi, 48, endpoint=False)
        for placement in ctx.placements:
            box = placement.box
            ca, sa = np.cos(box.yaw), np.sin(box.yaw)
            ex = np.cos(angles) * box.length / 2.0 * scale
            ey = np.sin(angles) * box.width / 2.0 * scale
            ring = np.stack([
                box.center[0] + ca * ex - sa * ey,
                box.center[1] + sa * ex + ca * ey,
                np.full_like(ex, box.center[2] - box.height / 2.0),
            ], axis=1)
            uv, depth, in_front = project_points(ring, ctx.extr, ctx.intr)
            if not in_front.all():
                continue  # ellipse crosses the near plane; skip rather than fold it
            draw.polygon([(float(u), float(v)) for u, v in uv], fill=255)
        mask = np.asarray(canvas, dtype=np.float64) / 255.0 * opacity
        if ctx.coverage is not None:
            mask = np.where(ctx.coverage, 0.0, mask)
        return _to_uint8(img.astype(np.float64) * (1.0 - mask[..., None]))

    return fn


@register_stage("external")
def _external(params: Mapping) -> StageFn:
    argv = params.get("argv")
    if not isinstance(argv, (list, tuple)) or not argv:
        raise ConfigError("external stage needs 'argv': a non-empty command list")
    argv = [str(a) for a in argv]
    timeout = _require_float(params, "timeout", 60.0, 1.0, 3600.0)

    def fn(img, ctx):
        with tempfile.TemporaryDirectory(prefix="roadsim-stage-") as tmp:
            src = Path(tmp) / "in.png"
            dst = Path(tmp) / "out.png"
            Image.fromarray(img).save(src)
            cmd = [a.replace("{input}", str(src)).replace("{output}", str(dst)) for a in argv]
            try:
                proc = subprocess.run(cmd, capture_output=True, timeout=timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise StageFailure(f"external stage {cmd[0]!r}: {exc}")
            if proc.returncode != 0:
                tail = proc.stderr.decode(errors="replace")[-500:]
                raise StageFailure(f"external stage exited {proc.returncode}: {tail}")
            if not dst.is_file():
                raise StageFailure("external stage wrote no output image")
            with Image.open(dst) as result:
                out = np.asarray(result.convert("RGB"))
        return out

    return fn
