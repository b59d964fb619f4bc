import numpy as np
import pytest

from ambientnorm import prior
from ambientnorm.prior import (
    LAYER_IDS,
    PriorError,
    RgbPatchEncoder,
    SemanticFeatureSet,
    SyntheticEncoder,
    load_features,
    save_features,
)
from ambientnorm.scenes import SceneConfig, generate_scene
from ambientnorm.tensor import Tensor


def _map(ids):
    return np.asarray(ids, dtype=np.float32)[None]


def test_deterministic_across_calls():
    mat = _map(np.random.default_rng(0).integers(0, 8, (16, 16)))
    a = SyntheticEncoder(3).encode(mat)
    b = SyntheticEncoder(3).encode(mat)
    for (lid_a, fa), (lid_b, fb) in zip(a.layers, b.layers):
        assert lid_a == lid_b
        assert np.array_equal(fa.data, fb.data)


def test_single_material_gives_constant_layers():
    mat = _map(np.zeros((32, 32)))
    feats = SyntheticEncoder(1).encode(mat)
    for _, f in feats.layers:
        flat = f.data.reshape(f.shape[1], -1)
        assert np.allclose(flat, flat[:, :1], atol=1e-6)


def test_layer_grid_schedule():
    mat = _map(np.zeros((64, 64)))
    feats = SyntheticEncoder(0).encode(mat)
    grids = {lid: f.shape[2:] for lid, f in feats.layers}
    assert grids[6] == (16, 16)
    assert grids[12] == (8, 8)
    assert grids[18] == (4, 4)
    assert grids[24] == (4, 4)


def test_illumination_invariance_between_renderings():
    from dataclasses import replace

    cfg = SceneConfig()
    scene = generate_scene(5, cfg)
    relit = generate_scene(5, replace(cfg, num_lights=0))
    assert not np.array_equal(scene.input, relit.input)
    enc = SyntheticEncoder(7)
    fa = enc.encode(scene.material_map[None])
    fb = enc.encode(relit.material_map[None])
    for (_, a), (_, b) in zip(fa.layers, fb.layers):
        assert np.array_equal(a.data, b.data)


def test_material_id_out_of_range():
    with pytest.raises(PriorError, match="out of range"):
        SyntheticEncoder(0, max_materials=8).encode(_map(np.full((8, 8), 9.0)))


def test_embedding_cosine_separation():
    for seed in range(5):
        emb = SyntheticEncoder(seed).embeddings
        cos = emb @ emb.T
        np.fill_diagonal(cos, 0.0)
        assert np.abs(cos).max() < 0.9


def test_feature_set_validation():
    good = [(lid, Tensor(np.zeros((1, 4, 2, 2), dtype=np.float32))) for lid in LAYER_IDS]
    SemanticFeatureSet(list(good))
    with pytest.raises(PriorError, match="4 layers"):
        SemanticFeatureSet(good[:3])
    shuffled = [good[1], good[0], good[2], good[3]]
    with pytest.raises(PriorError, match="increasing"):
        SemanticFeatureSet(shuffled)
    bad_width = list(good)
    bad_width[2] = (18, Tensor(np.zeros((1, 5, 2, 2), dtype=np.float32)))
    with pytest.raises(PriorError, match="N,D"):
        SemanticFeatureSet(bad_width)


def test_save_load_roundtrip_is_bit_exact(tmp_path):
    mat = _map(np.random.default_rng(4).integers(0, 6, (32, 32)))
    feats = SyntheticEncoder(11).encode(mat)
    path = tmp_path / "features.cndt"
    save_features(path, feats)
    back = load_features(path)
    for (lid_a, fa), (lid_b, fb) in zip(feats.layers, back.layers):
        assert lid_a == lid_b
        assert np.array_equal(fa.data, fb.data)


def test_load_missing_layer_names_key(tmp_path):
    mat = _map(np.zeros((16, 16)))
    feats = SyntheticEncoder(0).encode(mat)
    table = {f"layer_{lid}": f.data for lid, f in feats.layers if lid != 18}
    from ambientnorm import container

    path = tmp_path / "missing.cndt"
    container.write_tensors(path, table)
    with pytest.raises(PriorError, match="layer_18"):
        load_features(path)


def test_load_nonfinite_names_layer(tmp_path):
    mat = _map(np.zeros((16, 16)))
    feats = SyntheticEncoder(0).encode(mat)
    table = {f"layer_{lid}": f.data.copy() for lid, f in feats.layers}
    table["layer_12"][0, 0, 0, 0] = np.nan
    from ambientnorm import container

    path = tmp_path / "nan.cndt"
    container.write_tensors(path, table)
    with pytest.raises(PriorError, match="layer_12"):
        load_features(path)


def test_load_ignores_extra_records(tmp_path):
    mat = _map(np.zeros((16, 16)))
    feats = SyntheticEncoder(0).encode(mat)
    table = {f"layer_{lid}": f.data for lid, f in feats.layers}
    table["meta_input_size"] = np.asarray([64.0, 64.0], dtype=np.float32)
    from ambientnorm import container

    path = tmp_path / "extra.cndt"
    container.write_tensors(path, table)
    load_features(path)  # should not raise


def test_rgb_encoder_tracks_illumination():
    cfg = SceneConfig()
    scene = generate_scene(8, cfg)
    enc = RgbPatchEncoder()
    fin = enc.encode(scene.input[None])
    fgt = enc.encode(scene.gt[None])
    assert fin.dim == 3
    diffs = [np.abs(a.data - b.data).max() for (_, a), (_, b) in zip(fin.layers, fgt.layers)]
    assert max(diffs) > 0.01  # the weak baseline is not illumination invariant


def test_encode_synthetic_function():
    mat = _map(np.zeros((16, 16)))
    feats = prior.encode_synthetic(mat, seed=2, dim=16)
    assert feats.dim == 16
    assert feats.batch == 1
