from dataclasses import replace

import numpy as np
import pytest

from ambientnorm import container, ppm
from ambientnorm.scenes import (
    LightSource,
    SceneConfig,
    SceneConfigError,
    build_dataset,
    generate_scene,
    illumination_field,
    load_dataset,
    scene_ids,
)


def test_same_seed_is_bit_identical():
    cfg = SceneConfig()
    a = generate_scene(12, cfg)
    b = generate_scene(12, cfg)
    assert np.array_equal(a.input, b.input)
    assert np.array_equal(a.gt, b.gt)
    assert np.array_equal(a.material_map, b.material_map)


def test_fields_and_ranges():
    scene = generate_scene(0, SceneConfig())
    assert scene.input.shape == (3, 64, 64)
    assert scene.gt.shape == (3, 64, 64)
    assert scene.material_map.shape == (1, 64, 64)
    assert scene.input.min() >= 0.0 and scene.input.max() <= 1.0
    assert scene.gt.min() >= 0.0 and scene.gt.max() <= 1.0


def test_every_material_id_appears():
    cfg = SceneConfig(num_materials=12)
    for seed in range(5):
        scene = generate_scene(seed, cfg)
        assert set(np.unique(scene.material_map).astype(int)) == set(range(12))


def test_gt_is_illumination_free():
    cfg = SceneConfig()
    base = generate_scene(7, cfg)
    for variant in (
        replace(cfg, num_lights=0),
        replace(cfg, num_lights=4),
        replace(cfg, intensity_range=(0.5, 0.6)),
        replace(cfg, sigma_range=(0.05, 0.06)),
    ):
        other = generate_scene(7, variant)
        assert np.array_equal(base.gt, other.gt)
        assert np.array_equal(base.material_map, other.material_map)


def test_flat_field_means_input_equals_gt():
    cfg = replace(SceneConfig(), num_lights=0, ambient_floor=0.6, ambient_level=0.6)
    scene = generate_scene(3, cfg)
    assert np.array_equal(scene.input, scene.gt)


def test_red_light_saturates_highlight():
    # white albedo, one pure red light of intensity 4 right at a pixel:
    # field is (4.15, 0.15, 0.15) so the clipped input is (1, 0.15, 0.15)
    light = LightSource(color=(1.0, 0.0, 0.0), center=(0.5, 0.5), intensity=4.0, falloff_sigma=0.3)
    field = illumination_field([light], 9, 9, ambient_floor=0.15)
    center = field[:, 4, 4]
    assert center[0] == pytest.approx(4.15, abs=1e-2)
    assert center[1] == pytest.approx(0.15)
    value = np.clip(1.0 * center, 0.0, 1.0)
    assert value[0] == pytest.approx(1.0)
    assert value[1] == pytest.approx(0.15)


def test_config_validation():
    with pytest.raises(SceneConfigError):
        SceneConfig(height=30).validate()
    with pytest.raises(SceneConfigError):
        SceneConfig(num_materials=0).validate()
    with pytest.raises(SceneConfigError):
        SceneConfig(num_lights=5).validate()
    with pytest.raises(SceneConfigError):
        SceneConfig(ambient_level=0.0).validate()


def test_light_source_validation():
    with pytest.raises(SceneConfigError):
        LightSource(color=(0.0, 0.0, 0.0), center=(0.5, 0.5), intensity=1.0, falloff_sigma=0.2)
    with pytest.raises(SceneConfigError):
        LightSource(color=(1.0, 0.0, 0.0), center=(0.5, 0.5), intensity=-1.0, falloff_sigma=0.2)


def test_build_dataset_files_and_determinism(tmp_path):
    cfg = SceneConfig(height=16, width=16, num_materials=4)
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    build_dataset(5, 2, cfg, out_a)
    build_dataset(5, 2, cfg, out_b)
    files_a = sorted(p.name for p in out_a.iterdir())
    assert files_a == [
        "manifest.tsv",
        "scene_0_gt.cndt",
        "scene_0_input.cndt",
        "scene_0_mat.cndt",
        "scene_1_gt.cndt",
        "scene_1_input.cndt",
        "scene_1_mat.cndt",
    ]
    for name in files_a:
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()


def test_build_dataset_inputs_in_range(tmp_path):
    cfg = SceneConfig(height=16, width=16, num_materials=4)
    build_dataset(1, 3, cfg, tmp_path / "d")
    for i in range(3):
        _, arr = container.read_single(tmp_path / "d" / f"scene_{i}_input.cndt")
        assert arr.min() >= 0.0 and arr.max() <= 1.0


def test_load_dataset_and_ids(tmp_path):
    cfg = SceneConfig(height=16, width=16, num_materials=4)
    build_dataset(2, 3, cfg, tmp_path / "d")
    scenes = load_dataset(tmp_path / "d")
    assert len(scenes) == 3
    assert scene_ids(tmp_path / "d") == ["scene_0", "scene_1", "scene_2"]
    direct = generate_scene(2, cfg)
    assert np.array_equal(scenes[0].input, direct.input)


def test_ppm_export_roundtrip(tmp_path):
    cfg = SceneConfig(height=16, width=16, num_materials=4)
    build_dataset(0, 1, cfg, tmp_path / "d", write_ppm=True)
    img = ppm.read_ppm(tmp_path / "d" / "scene_0_input.ppm")
    _, exact = container.read_single(tmp_path / "d" / "scene_0_input.cndt")
    assert img.shape == exact.shape
    assert np.abs(img - exact).max() <= 0.5 / 255 + 1e-6  # 8-bit quantization only


def test_ppm_writer_reader_exact_quantization(tmp_path):
    rng = np.random.default_rng(0)
    image = rng.random((3, 5, 7)).astype(np.float32)
    path = tmp_path / "x.ppm"
    ppm.write_ppm(path, image)
    back = ppm.read_ppm(path)
    assert np.array_equal(np.rint(image * 255), np.rint(back * 255))


def test_count_validation(tmp_path):
    with pytest.raises(SceneConfigError):
        build_dataset(0, 0, SceneConfig(), tmp_path / "x")
