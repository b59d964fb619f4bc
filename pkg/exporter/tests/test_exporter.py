import subprocess
import sys

import numpy as np
import pytest

from vit_feature_export import ExportError, ExportJob, export_features
from vit_feature_export.cli import main

# the consumer package: used in tests to validate the produced files
from ambientnorm import prior
from ambientnorm.cli import main as ambientnorm_main


@pytest.fixture(scope="session")
def tiny_vit(tmp_path_factory):
    """A 24-layer ViT checkpoint materialized locally with seeded weights.

    Hub access is unavailable in CI, so the tests exercise the exporter
    against a small randomly initialized encoder saved to disk; the export
    pipeline (hidden states, token grids, projection, container format) is
    identical to running a full pretrained model.
    """
    import torch
    from transformers import ViTConfig, ViTModel

    torch.manual_seed(0)
    config = ViTConfig(
        hidden_size=32,
        num_hidden_layers=24,
        num_attention_heads=2,
        intermediate_size=64,
        image_size=64,
        patch_size=16,
        num_channels=3,
    )
    model = ViTModel(config)
    path = tmp_path_factory.mktemp("weights") / "tiny-vit"
    model.save_pretrained(path)
    return str(path)


@pytest.fixture(scope="session")
def scene_ppms(tmp_path_factory):
    data_dir = tmp_path_factory.mktemp("scenes")
    code = ambientnorm_main([
        "gen-data", "--seed", "11", "--count", "3", "--out", str(data_dir),
        "--size", "32", "--materials", "4", "--ppm",
    ])
    assert code == 0
    return data_dir


def test_export_produces_loadable_containers(tiny_vit, scene_ppms, tmp_path):
    job = ExportJob(
        images=[scene_ppms / "scene_0_input.ppm"],
        weights=tiny_vit,
        out_dir=tmp_path / "feats",
        dim=16,
        seed=3,
        input_size=64,
    )
    written = export_features(job)
    assert len(written) == 1
    feats = prior.load_features(written[0])
    assert feats.dim == 16
    assert feats.batch == 1
    for lid, feat in feats.layers:
        assert feat.shape == (1, 16, 4, 4)  # 64px / 16px patches
        assert np.isfinite(feat.data).all()


def test_reexport_is_byte_identical(tiny_vit, scene_ppms, tmp_path):
    image = scene_ppms / "scene_1_input.ppm"
    outs = []
    for name in ("a", "b"):
        job = ExportJob(images=[image], weights=tiny_vit, out_dir=tmp_path / name,
                        dim=8, seed=5, input_size=64)
        outs.append(export_features(job)[0])
    assert outs[0].read_bytes() == outs[1].read_bytes()


def test_projection_seed_changes_output(tiny_vit, scene_ppms, tmp_path):
    image = scene_ppms / "scene_1_input.ppm"
    paths = []
    for seed in (0, 1):
        job = ExportJob(images=[image], weights=tiny_vit, out_dir=tmp_path / str(seed),
                        dim=8, seed=seed, input_size=64)
        paths.append(export_features(job)[0])
    assert paths[0].read_bytes() != paths[1].read_bytes()


def test_missing_weights_is_export_error(scene_ppms, tmp_path):
    job = ExportJob(images=[scene_ppms / "scene_0_input.ppm"], weights=str(tmp_path / "nope"),
                    out_dir=tmp_path / "out")
    with pytest.raises(ExportError, match="weights"):
        export_features(job)


def test_unreadable_image_is_export_error(tiny_vit, tmp_path):
    bogus = tmp_path / "broken.ppm"
    bogus.write_bytes(b"P6\n2 2\n255\nxx")  # truncated payload
    job = ExportJob(images=[bogus], weights=tiny_vit, out_dir=tmp_path / "out", input_size=64)
    with pytest.raises(ExportError, match="broken.ppm"):
        export_features(job)


def test_layer_out_of_range(tiny_vit, scene_ppms, tmp_path):
    job = ExportJob(images=[scene_ppms / "scene_0_input.ppm"], weights=tiny_vit,
                    out_dir=tmp_path / "out", layers=(6, 12, 18, 30), input_size=64)
    with pytest.raises(ExportError, match="30"):
        export_features(job)


def test_cli_roundtrip_and_exit_codes(tiny_vit, scene_ppms, tmp_path, capsys):
    out_dir = tmp_path / "cli_feats"
    code = main([
        "--images", str(scene_ppms / "scene_0_input.ppm"), str(scene_ppms / "scene_0_gt.ppm"),
        "--out", str(out_dir), "--weights", tiny_vit, "--dim", "8", "--seed", "2",
        "--input-size", "64",
    ])
    assert code == 0
    out = capsys.readouterr().out
    assert "wrote" in out
    assert (out_dir / "scene_0_input.feat.cndt").exists()
    assert (out_dir / "scene_0_gt.feat.cndt").exists()
    bad = main(["--images", "x.ppm", "--out", str(out_dir), "--weights", str(tmp_path / "missing")])
    assert bad == 2


def test_consistency_run_on_exported_features(tiny_vit, scene_ppms, tmp_path, capsys):
    # export input and GT features for every scene, then drive the consumer's
    # consistency analysis over them: the report must satisfy W <= P
    out_dir = tmp_path / "feats"
    images = sorted(scene_ppms.glob("scene_*_input.ppm")) + sorted(scene_ppms.glob("scene_*_gt.ppm"))
    job = ExportJob(images=list(images), weights=tiny_vit, out_dir=out_dir,
                    dim=16, seed=4, input_size=64)
    export_features(job)
    code = ambientnorm_main([
        "consistency", "--data", str(scene_ppms), "--provider", f"file:{out_dir}", "--patch", "1",
    ])
    assert code == 0
    lines = capsys.readouterr().out.splitlines()
    values = dict(line.split("=") for line in lines if "=" in line and not line.startswith(" "))
    p_micro, worst = float(values["P_micro"]), float(values["W"])
    assert -1.0 <= worst <= p_micro <= 1.0
