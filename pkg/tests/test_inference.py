import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flashpath.inference import (
    InferenceConfig,
    LabelGrid,
    count_patches_dense,
    count_patches_flash,
    dense_infer,
    disagreement_report,
    extract_aggregate_features,
    flash_infer,
    grid_to_mask,
    infer_mask,
    strided_infer,
)
from flashpath.network import build_model, forward_features, forward_patch


@pytest.fixture(scope="module")
def model():
    return build_model(7)


def _image(side, seed=0, w=None):
    return np.random.default_rng(seed).random((side, w or side, 3)).astype(np.float32)


@pytest.mark.parametrize("l,dense,flash", [
    (32, 1, 1),
    (64, 1089, 4),
    (300, 269 ** 2, 81),
    (2048, 4_068_289, 4096),
])
def test_count_formulas(l, dense, flash):
    assert count_patches_dense(l, 32) == dense
    assert count_patches_flash(l, 32) == flash


def test_count_ratio_and_errors():
    assert round(count_patches_dense(2048) / count_patches_flash(2048)) == 993
    with pytest.raises(ValueError):
        count_patches_dense(31)
    with pytest.raises(ValueError):
        count_patches_flash(16, 32)


def test_config_validation():
    InferenceConfig(side=64, stride=32, engine="flash")
    for bad in (dict(side=64, window=16), dict(side=64, stride=0), dict(side=64, stride=33),
                dict(side=31), dict(side=64, engine="fast")):
        with pytest.raises(ValueError):
            InferenceConfig(**bad)


def test_label_grid_shape_check():
    with pytest.raises(ValueError):
        LabelGrid((16, 16), 4, np.zeros((2, 2), int), np.zeros((2, 3)))


def test_single_patch_image(model):
    img = _image(32)
    ref = forward_patch(model, img)
    for g in (dense_infer(model, img, 5), flash_infer(model, img)):
        assert g.shape == (1, 1)
        assert g.labels[0, 0] == ref.label
        np.testing.assert_allclose(g.logits[0, 0], ref.logits, rtol=1e-6)


def test_dense_site_counts(model):
    img = _image(64)
    g = dense_infer(model, img, 1)
    assert g.shape == (33, 33) and g.conv_calls == 1089 and g.origin == (16, 16)
    g32 = dense_infer(model, img, 32)
    assert g32.shape == (2, 2)
    for a in range(2):
        for b in range(2):
            ref = forward_patch(model, img[32 * a:32 * a + 32, 32 * b:32 * b + 32])
            np.testing.assert_allclose(g32.logits[a, b], ref.logits, rtol=1e-5, atol=1e-6)


def test_dense_rejects_small_images(model):
    with pytest.raises(ValueError):
        dense_infer(model, _image(31))
    with pytest.raises(ValueError):
        flash_infer(model, _image(20))
    with pytest.raises(ValueError):
        dense_infer(model, _image(40), stride=0)


def test_feature_grid_layout(model):
    img = _image(64, 1)
    fg = extract_aggregate_features(model, img)
    assert fg.data.shape == (16, 16, 64) and fg.tiles_per_side == 2
    for a in range(2):
        for b in range(2):
            tile = img[32 * a:32 * a + 32, 32 * b:32 * b + 32]
            assert np.array_equal(fg.block(a, b), forward_features(model, tile))


def test_leftover_pixels_ignored(model):
    big = _image(70, 2)
    small = big[:64, :64]
    a, b = flash_infer(model, big), flash_infer(model, small)
    assert a.shape == (9, 9)
    assert np.array_equal(a.logits, b.logits)
    assert np.array_equal(extract_aggregate_features(model, big).data,
                          extract_aggregate_features(model, small).data)


def test_flash_site_count_and_calls(model):
    g = flash_infer(model, _image(64, 3))
    assert g.shape == (9, 9) and g.stride == 4 and g.origin == (16, 16)
    assert (g.conv_calls, g.head_calls) == (4, 81)


def test_tile_aligned_equivalence(model):
    img = _image(96, 4)
    fl = flash_infer(model, img)
    ds = dense_infer(model, img, 32)
    np.testing.assert_allclose(fl.logits[::8, ::8], ds.logits, rtol=1e-5, atol=1e-6)
    assert np.array_equal(fl.labels[::8, ::8], ds.labels)


def test_non_square_images(model):
    img = _image(64, 5, w=96)
    fl = flash_infer(model, img)
    assert fl.shape == (9, 17) and fl.conv_calls == 6
    mask, prob = grid_to_mask(fl, img.shape[:2])
    assert mask.shape == prob.shape == (64, 96)


def test_grid_to_mask_rules():
    g = LabelGrid((16, 16), 4, np.array([[0, 1]]), np.array([[0.2, 0.8]]))
    mask, prob = grid_to_mask(g, (1, 40))
    # columns 0..18 nearest to site 16 (tie at 18 goes left), 19.. to site 20
    assert mask[0].tolist() == [False] * 19 + [True] * 21
    assert prob.dtype == np.float32

    one = LabelGrid((16, 16), 1, np.array([[1]]), np.array([[0.9]]))
    m, p = grid_to_mask(one, 32)
    assert m.all() and np.all(p == np.float32(0.9))
    with pytest.raises(ValueError):
        grid_to_mask(LabelGrid((16, 16), 1, np.zeros((0, 0), int), np.zeros((0, 0))), 32)


@settings(max_examples=30)
@given(st.integers(1, 8), st.integers(1, 6), st.integers(0, 40))
def test_nearest_site_property(stride, n, origin):
    idx = np.arange(n)
    g = LabelGrid((0, origin), stride, (idx % 2)[None, :], idx[None, :].astype(float))
    width = origin + n * stride + 10
    got = grid_to_mask(g, (1, width))[1][0].astype(int)
    sites = origin + stride * idx
    for x in range(width):
        d = np.abs(sites - x)
        assert got[x] == int(np.flatnonzero(d == d.min())[0])


def test_stride_one_mask_matches_dense_labels(model):
    img = _image(48, 6)
    g = dense_infer(model, img, 1)
    mask, _ = grid_to_mask(g, 48)
    assert np.array_equal(mask[16:33, 16:33], g.labels.astype(bool))


def test_strided_stride_one_equals_dense(model):
    img = _image(40, 7)
    m1, p1, _ = strided_infer(model, img, 1)
    m2, p2, _ = infer_mask(model, img, "dense")
    assert np.array_equal(m1, m2) and np.array_equal(p1, p2)


def test_infer_mask_engine_rules(model):
    img = _image(64, 8)
    with pytest.raises(ValueError):
        infer_mask(model, img, "flash", stride=4)
    with pytest.raises(ValueError):
        infer_mask(model, img, "sparse")
    _, _, g = infer_mask(model, img, "dense")
    assert g.stride == 1
    _, _, g = infer_mask(model, img, "strided")
    assert g.stride == 32


@pytest.mark.parametrize("engine", ["dense", "strided", "flash"])
def test_parallel_matches_serial(model, engine):
    img = _image(96, 9)
    a = infer_mask(model, img, engine, threads=1)
    b = infer_mask(model, img, engine, threads=4)
    assert a[2].logits.tobytes() == b[2].logits.tobytes()
    assert np.array_equal(a[0], b[0]) and a[1].tobytes() == b[1].tobytes()


def test_disagreement_report_aligned_sites_agree(model):
    rep = disagreement_report(model, _image(96, 10))
    assert rep.sites == 17 * 17
    assert rep.aligned_sites == 9 and rep.aligned_disagreements == 0
    assert 0 <= rep.rate <= 1
