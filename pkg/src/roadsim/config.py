"""Declarative pipeline configuration (YAML or JSON).

One file drives a whole run: where the scene lives, which stages to
execute, grid and sampler parameters, the asset catalog, the post
chain, and the output root. A single top-level seed derives every
random stream in the run.

Schema (defaults in parentheses):

    scene_root: path            # required
    output_root: path           # required
    seed: int (0)
    workers: int (1)
    frames: [ids] (all frames under scene_root)
    stages:                     # all true by default
      calibrate: bool
      sample: bool
      depth: bool
      composite: bool
      post: bool
    assets_manifest: path (scene_root/assets/manifest.json)
    keypoints: path (scene_root/keypoints.json, used when it exists)
    grid:
      origin: [x, y] ([0, -8])
      cell_size: float (1.0)
      nx: int (24), ny: int (16)
      ground_z: float (0.0)
      seed_points: "labels" | [[x, y], ...] ("labels")
    placement:
      count: {kind: fixed|uniform|poisson, ...} (uniform lo=2 hi=6)
      top_k: int (5), max_retries: int (50), r_seed: float (3.0)
      default_asset_height: float (1.6)
      yaw_choices: [floats] | null (null = uniform)
    post_chain: [{name: ..., params...}] ([])
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import yaml

from .errors import ConfigError
from .placement import SamplerConfig
from .postfx import PostStage, resolve, stages_from_config

STAGE_NAMES = ("calibrate", "sample", "depth", "composite", "post")


@dataclass(frozen=True)
class CountDistribution:
    """How many placements to request per frame."""

    kind: str = "uniform"
    value: int = 4  # fixed
    lo: int = 2  # uniform
    hi: int = 6
    lam: float = 3.0  # poisson

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform", "poisson"):
            raise ConfigError(f"count kind must be fixed/uniform/poisson, got {self.kind!r}")
        if self.kind == "fixed" and self.value < 0:
            raise ConfigError("fixed count must be >= 0")
        if self.kind == "uniform" and not 0 <= self.lo <= self.hi:
            raise ConfigError(f"uniform count needs 0 <= lo <= hi, got [{self.lo}, {self.hi}]")
        if self.kind == "poisson" and self.lam < 0:
            raise ConfigError("poisson lambda must be >= 0")

    def draw(self, rng: np.random.Generator) -> int:
        if self.kind == "fixed":
            return self.value
        if self.kind == "uniform":
            return int(rng.integers(self.lo, self.hi + 1))
        return int(rng.poisson(self.lam))


@dataclass(frozen=True)
class GridSettings:
    origin: Tuple[float, float] = (0.0, -8.0)
    cell_size: float = 1.0
    nx: int = 24
    ny: int = 16
    ground_z: float = 0.0
    seed_points: object = "labels"  # "labels" or explicit [[x, y], ...]

    def __post_init__(self):
        if self.cell_size <= 0 or self.nx < 1 or self.ny < 1:
            raise ConfigError("grid needs cell_size > 0 and nx, ny >= 1")
        if not (self.seed_points == "labels" or isinstance(self.seed_points, (list, tuple))):
            raise ConfigError("grid.seed_points must be 'labels' or a list of [x, y]")


@dataclass(frozen=True)
class StageToggles:
    calibrate: bool = True
    sample: bool = True
    depth: bool = True
    composite: bool = True
    post: bool = True


@dataclass(frozen=True)
class PipelineConfig:
    scene_root: str
    output_root: str
    seed: int = 0
    workers: int = 1
    frames: Optional[List[str]] = None
    stages: StageToggles = StageToggles()
    assets_manifest: Optional[str] = None
    keypoints: Optional[str] = None
    grid: GridSettings = GridSettings()
    count: CountDistribution = CountDistribution()
    sampler: SamplerConfig = SamplerConfig()
    post_chain: Tuple[PostStage, ...] = ()

    def manifest_path(self) -> Path:
        if self.assets_manifest:
            return Path(self.assets_manifest)
        return Path(self.scene_root) / "assets" / "manifest.json"

    def keypoints_path(self) -> Optional[Path]:
        if self.keypoints:
            return Path(self.keypoints)
        default = Path(self.scene_root) / "keypoints.json"
        return default if default.is_file() else None


def _expect_mapping(value, name: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{name} must be a mapping, got {type(value).__name__}")
    return value


def parse_config(data: dict, base_dir: Optional[Path] = None) -> PipelineConfig:
    data = _expect_mapping(data, "config")
    unknown = set(data) - {
        "scene_root", "output_root", "seed", "workers", "frames", "stages",
        "assets_manifest", "keypoints", "grid", "placement", "post_chain",
    }
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("scene_root", "output_root"):
        if not data.get(key):
            raise ConfigError(f"config is missing required key {key!r}")

    def _path(value):
        p = Path(value)
        if base_dir is not None and not p.is_absolute():
            p = base_dir / p
        return str(p)

    stages_d = _expect_mapping(data.get("stages"), "stages")
    bad = set(stages_d) - set(STAGE_NAMES)
    if bad:
        raise ConfigError(f"unknown stage toggles: {sorted(bad)}; known: {list(STAGE_NAMES)}")
    toggles = StageToggles(**{k: bool(v) for k, v in stages_d.items()})

    grid_d = _expect_mapping(data.get("grid"), "grid")
    try:
        grid = GridSettings(
            origin=tuple(float(v) for v in grid_d.get("origin", (0.0, -8.0))),
            cell_size=float(grid_d.get("cell_size", 1.0)),
            nx=int(grid_d.get("nx", 24)),
            ny=int(grid_d.get("ny", 16)),
            ground_z=float(grid_d.get("ground_z", 0.0)),
            seed_points=grid_d.get("seed_points", "labels"),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad grid settings: {exc}")

    placement_d = _expect_mapping(data.get("placement"), "placement")
    count_d = _expect_mapping(placement_d.get("count"), "placement.count")
    count_kind = count_d.get("kind", "uniform")
    try:
        count = CountDistribution(
            kind=str(count_kind),
            value=int(count_d.get("value", 4)),
            lo=int(count_d.get("lo", 2)),
            hi=int(count_d.get("hi", 6)),
            lam=float(count_d.get("lam", 3.0)),
        )
        yaw_choices = placement_d.get("yaw_choices")
        sampler = SamplerConfig(
            top_k=int(placement_d.get("top_k", 5)),
            max_retries=int(placement_d.get("max_retries", 50)),
            r_seed=float(placement_d.get("r_seed", 3.0)),
            default_asset_height=float(placement_d.get("default_asset_height", 1.6)),
            yaw_choices=None if yaw_choices is None else [float(y) for y in yaw_choices],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad placement settings: {exc}")

    chain_raw = data.get("post_chain") or []
    if not isinstance(chain_raw, list):
        raise ConfigError("post_chain must be a list of stage mappings")
    post_chain = tuple(stages_from_config(chain_raw))
    for stage in post_chain:  # registry closure: fail at config time, not mid-run
        resolve(stage)

    frames = data.get("frames")
    if frames is not None:
        if not isinstance(frames, list):
            raise ConfigError("frames must be a list of frame ids")
        frames = [str(f) for f in frames]

    try:
        workers = int(data.get("workers", 1))
        seed = int(data.get("seed", 0))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad scalar setting: {exc}")
    if workers < 1:
        raise ConfigError("workers must be >= 1")

    return PipelineConfig(
        scene_root=_path(data["scene_root"]),
        output_root=_path(data["output_root"]),
        seed=seed,
        workers=workers,
        frames=frames,
        stages=toggles,
        assets_manifest=_path(data["assets_manifest"]) if data.get("assets_manifest") else None,
        keypoints=_path(data["keypoints"]) if data.get("keypoints") else None,
        grid=grid,
        count=count,
        sampler=sampler,
        post_chain=post_chain,
    )


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        if path.suffix == ".json":
            data = json.loads(text)
        else:
            data = yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data, base_dir=path.parent)
