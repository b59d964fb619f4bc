"""Deterministic synthetic colored-illumination scenes.

A scene is a Voronoi partition of materials, each with a random albedo.
The ground truth is the albedo under a flat ambient level; the input is the
albedo under an illumination field combining a dim ambient floor with a few
colored Gaussian light spots, hard-clipped to [0, 1] so strong lights
saturate exactly like blown highlights.

Material/albedo draws and light draws come from independent seeded streams,
so the ground truth never depends on the lighting configuration.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import container, ppm

AMBIENT_FLOOR_DEFAULT = 0.15


class SceneConfigError(ValueError):
    pass


@dataclass
class LightSource:
    color: tuple[float, float, float]
    center: tuple[float, float]  # normalized x, y in [0, 1]
    intensity: float
    falloff_sigma: float

    def __post_init__(self):
        vals = (*self.color, *self.center, self.intensity, self.falloff_sigma)
        if not all(np.isfinite(v) for v in vals):
            raise SceneConfigError("light source fields must be finite")
        if max(self.color) <= 0:
            raise SceneConfigError("light color must have a nonzero channel")
        if self.intensity <= 0 or self.falloff_sigma <= 0:
            raise SceneConfigError("light intensity and falloff must be positive")


@dataclass
class SceneConfig:
    height: int = 64
    width: int = 64
    num_materials: int = 8
    num_lights: int = 2
    ambient_level: float = 0.6
    ambient_floor: float = AMBIENT_FLOOR_DEFAULT
    intensity_range: tuple[float, float] = (1.5, 4.5)
    sigma_range: tuple[float, float] = (0.18, 0.40)

    def validate(self):
        if self.height % 8 or self.width % 8:
            raise SceneConfigError(f"height and width must be divisible by 8, got {self.height}x{self.width}")
        if not 1 <= self.num_materials <= 64:
            raise SceneConfigError(f"num_materials must be in [1, 64], got {self.num_materials}")
        if not 0 <= self.num_lights <= 4:
            raise SceneConfigError(f"num_lights must be in [0, 4], got {self.num_lights}")
        if not 0 < self.ambient_level <= 1:
            raise SceneConfigError(f"ambient_level must be in (0, 1], got {self.ambient_level}")


@dataclass
class SceneTriplet:
    """input/gt are 3,H,W float32 in [0,1]; material_map is 1,H,W float32
    holding integer ids shared by both renderings."""

    input: np.ndarray
    gt: np.ndarray
    material_map: np.ndarray
    lights: list[LightSource] = field(default_factory=list)


def _pixel_centers(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys = (np.arange(h, dtype=np.float64) + 0.5) / h
    xs = (np.arange(w, dtype=np.float64) + 0.5) / w
    return np.meshgrid(xs, ys)  # px, py each H,W


def _voronoi_materials(rng, h: int, w: int, count: int) -> np.ndarray:
    """Nearest-site labels; redraws sites until every id owns pixels."""
    px, py = _pixel_centers(h, w)
    for _ in range(200):
        sites = rng.uniform(0.0, 1.0, size=(count, 2))
        d2 = (px[None] - sites[:, 0, None, None]) ** 2 + (py[None] - sites[:, 1, None, None]) ** 2
        labels = np.argmin(d2, axis=0)
        if len(np.unique(labels)) == count:
            return labels
    raise SceneConfigError(f"could not place {count} non-empty material cells on {h}x{w}")


def _draw_lights(rng, config: SceneConfig) -> list[LightSource]:
    lights = []
    for _ in range(config.num_lights):
        color = rng.uniform(0.0, 1.0, size=3)
        color = color / max(color.max(), 1e-6)  # saturate the dominant channel
        center = rng.uniform(0.12, 0.88, size=2)
        intensity = rng.uniform(*config.intensity_range)
        sigma = rng.uniform(*config.sigma_range)
        lights.append(
            LightSource(
                color=tuple(float(v) for v in color),
                center=(float(center[0]), float(center[1])),
                intensity=float(intensity),
                falloff_sigma=float(sigma),
            )
        )
    return lights


def illumination_field(lights: list[LightSource], h: int, w: int, ambient_floor: float) -> np.ndarray:
    """3,H,W field: ambient floor plus Gaussian colored spots."""
    px, py = _pixel_centers(h, w)
    field_rgb = np.full((3, h, w), float(ambient_floor), dtype=np.float64)
    for light in lights:
        d2 = (px - light.center[0]) ** 2 + (py - light.center[1]) ** 2
        spot = light.intensity * np.exp(-d2 / (2.0 * light.falloff_sigma**2))
        field_rgb += np.asarray(light.color, dtype=np.float64)[:, None, None] * spot[None]
    return field_rgb


def generate_scene(seed: int, config: SceneConfig) -> SceneTriplet:
    config.validate()
    rng_mat = np.random.default_rng([int(seed), 0])
    rng_light = np.random.default_rng([int(seed), 1])

    labels = _voronoi_materials(rng_mat, config.height, config.width, config.num_materials)
    albedos = rng_mat.uniform(0.1, 0.9, size=(config.num_materials, 3))
    albedo_map = albedos[labels].transpose(2, 0, 1)  # 3,H,W

    gt = albedo_map * config.ambient_level

    lights = _draw_lights(rng_light, config)
    field_rgb = illumination_field(lights, config.height, config.width, config.ambient_floor)
    image = np.clip(albedo_map * field_rgb, 0.0, 1.0)

    return SceneTriplet(
        input=image.astype(np.float32),
        gt=gt.astype(np.float32),
        material_map=labels[None].astype(np.float32),
        lights=lights,
    )


def _config_lines(seed: int, count: int, config: SceneConfig) -> list[str]:
    return [
        f"# seed = {seed}",
        f"# count = {count}",
        f"# height = {config.height}",
        f"# width = {config.width}",
        f"# num_materials = {config.num_materials}",
        f"# num_lights = {config.num_lights}",
        f"# ambient_level = {config.ambient_level}",
        f"# ambient_floor = {config.ambient_floor}",
    ]


def build_dataset(
    seed: int,
    count: int,
    config: SceneConfig,
    out_dir: str | os.PathLike,
    write_ppm: bool = False,
) -> Path:
    """Write ``count`` scenes (seeds seed..seed+count-1) plus a manifest.

    Returns the manifest path.  Outputs carry no timestamps, so regenerating
    with the same arguments is byte-identical.
    """
    if count < 1:
        raise SceneConfigError(f"count must be >= 1, got {count}")
    config.validate()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc

    lines = _config_lines(seed, count, config)
    for i in range(count):
        scene = generate_scene(seed + i, config)
        names = (f"scene_{i}_input.cndt", f"scene_{i}_gt.cndt", f"scene_{i}_mat.cndt")
        container.write_single(out / names[0], "input", scene.input)
        container.write_single(out / names[1], "gt", scene.gt)
        container.write_single(out / names[2], "material", scene.material_map)
        if write_ppm:
            ppm.write_ppm(out / f"scene_{i}_input.ppm", scene.input)
            ppm.write_ppm(out / f"scene_{i}_gt.ppm", scene.gt)
        lines.append(f"scene_{i}\t{names[0]}\t{names[1]}\t{names[2]}")

    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def load_dataset(data_dir: str | os.PathLike) -> list[SceneTriplet]:
    """Read scenes listed in ``manifest.tsv`` under ``data_dir``."""
    root = Path(data_dir)
    manifest = root / "manifest.tsv" if root.is_dir() else root
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest at {manifest}")
    base = manifest.parent
    scenes = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("#"):
            continue
        _, input_rel, gt_rel, mat_rel = line.split("\t")
        _, image = container.read_single(base / input_rel)
        _, gt = container.read_single(base / gt_rel)
        _, mat = container.read_single(base / mat_rel)
        scenes.append(SceneTriplet(input=image, gt=gt, material_map=mat))
    if not scenes:
        raise SceneConfigError(f"manifest {manifest} lists no scenes")
    return scenes


def scene_ids(data_dir: str | os.PathLike) -> list[str]:
    root = Path(data_dir)
    manifest = root / "manifest.tsv" if root.is_dir() else root
    ids = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if line and not line.startswith("#"):
            ids.append(line.split("\t")[0])
    return ids


def default_config(**overrides) -> SceneConfig:
    return replace(SceneConfig(), **overrides)
