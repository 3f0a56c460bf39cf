import colorsys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phenofactor.errors import (
    DimensionMismatch,
    EmbedderDimensionMismatch,
    EmptyMask,
    ImageTooSmall,
    MissingLandmarks,
)
from phenofactor.phenotype import (
    DEFAULT_CLASSES,
    PATCH_SIZE,
    THETA_DIMS,
    PhenotypeVector,
    RegionMask,
    compute_phenotype,
    extract_patch,
    hair_region,
    patch_window,
    region_color_stats,
    skin_region,
)
from phenofactor.synthetic import ToyFaceParams, class_colors, render_toy_face


def brute_force_stats(image, mask):
    """Scalar per-pixel loop: HSV from colorsys, Cr from the BT.601 full-range formula."""
    vs, ss, crs = [], [], []
    for i in range(image.shape[0]):
        for j in range(image.shape[1]):
            if not mask[i, j]:
                continue
            r, g, b = (int(c) for c in image[i, j])
            _, s, v = colorsys.rgb_to_hsv(r / 255.0, g / 255.0, b / 255.0)
            cr = 0.5 * r - 0.4187 * g - 0.0813 * b + 128.0
            vs.append(v)
            ss.append(s)
            crs.append(min(max(cr, 0.0), 255.0) / 255.0)
    return np.mean(vs), np.mean(ss), np.mean(crs)


def test_white_image():
    img = np.full((8, 8, 3), 255, np.uint8)
    st_ = region_color_stats(img, np.ones((8, 8), bool))
    assert (st_.v_mean, st_.s_mean) == (1.0, 0.0)
    assert st_.cr_mean == pytest.approx(128 / 255, abs=1e-12)
    assert round(st_.cr_mean, 5) == 0.50196


def test_red_image():
    img = np.zeros((4, 4, 3), np.uint8)
    img[..., 0] = 255
    st_ = region_color_stats(img, np.ones((4, 4), bool))
    assert st_.as_array().tolist() == [1.0, 1.0, 1.0]


def test_black_image_has_zero_saturation():
    st_ = region_color_stats(np.zeros((4, 4, 3), np.uint8), np.ones((4, 4), bool))
    assert st_.v_mean == 0.0 and st_.s_mean == 0.0
    assert st_.cr_mean == pytest.approx(128 / 255)


def test_matches_brute_force_on_random_half_mask(rng):
    img = rng.integers(0, 256, size=(128, 128, 3), dtype=np.uint8)
    mask = rng.random((128, 128)) < 0.5
    got = region_color_stats(img, RegionMask(mask, "skin")).as_array()
    np.testing.assert_allclose(got, brute_force_stats(img, mask), atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), h=st.integers(1, 12), w=st.integers(1, 12))
def test_matches_brute_force_property(seed, h, w):
    r = np.random.default_rng(seed)
    img = r.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    mask = r.random((h, w)) < 0.6
    mask.flat[r.integers(mask.size)] = True
    got = region_color_stats(img, mask).as_array()
    np.testing.assert_allclose(got, brute_force_stats(img, mask), atol=1e-6)
    assert np.all((got >= 0) & (got <= 1))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_permutation_invariance(seed):
    r = np.random.default_rng(seed)
    img = r.integers(0, 256, size=(6, 7, 3), dtype=np.uint8)
    mask = r.random((6, 7)) < 0.5
    mask[0, 0] = True
    perm = r.permutation(42)
    img2 = img.reshape(42, 3)[perm].reshape(6, 7, 3)
    mask2 = mask.reshape(42)[perm].reshape(6, 7)
    np.testing.assert_allclose(region_color_stats(img, mask).as_array(),
                               region_color_stats(img2, mask2).as_array(), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), alpha=st.floats(0.05, 0.9))
def test_darkening_lowers_value(seed, alpha):
    r = np.random.default_rng(seed)
    img = r.integers(40, 256, size=(8, 8, 3), dtype=np.uint8)
    mask = np.ones((8, 8), bool)
    dark = np.floor(img * alpha).astype(np.uint8)
    assert region_color_stats(dark, mask).v_mean < region_color_stats(img, mask).v_mean


def test_empty_and_mismatched_masks():
    img = np.zeros((4, 4, 3), np.uint8)
    with pytest.raises(EmptyMask):
        region_color_stats(img, np.zeros((4, 4), bool))
    with pytest.raises(DimensionMismatch):
        region_color_stats(img, np.ones((3, 4), bool))


def _quad_landmarks(n=64):
    """68 points: jaw/brows form a centred square, small eye and mouth hulls inside."""
    lm = np.zeros((68, 2))
    square = np.array([[16, 16], [48, 16], [48, 48], [16, 48]], float)
    lm[0:17] = square[np.arange(17) % 4]
    lm[17:27] = square[np.arange(10) % 4]
    lm[27:36] = [32, 32]
    lm[36:42] = np.array([[20, 24], [22, 22], [24, 22], [26, 24], [24, 26], [22, 26]])
    lm[42:48] = lm[36:42] + [18, 0]
    lm[48:60] = np.array([[26, 40], [30, 38], [34, 38], [38, 40], [34, 42], [30, 42]] * 2)
    lm[60:68] = [32, 40]
    return lm


def test_skin_region_on_full_skin_segmentation():
    from phenofactor.phenotype import hull_mask

    lm = _quad_landmarks()
    seg = np.full((64, 64), DEFAULT_CLASSES["skin"])
    got = skin_region(seg, lm).bits
    expected = hull_mask(lm[0:27], 64, 64) & ~hull_mask(lm[36:42], 64, 64) & ~hull_mask(lm[42:48], 64, 64)
    expected &= ~hull_mask(lm[48:60], 64, 64)
    assert np.array_equal(got, expected)
    assert got.sum() < 32 * 32


def test_skin_region_errors():
    lm = _quad_landmarks()
    with pytest.raises(EmptyMask):
        skin_region(np.zeros((64, 64), int), lm)
    with pytest.raises(MissingLandmarks):
        skin_region(np.ones((64, 64), int), lm[:30])


@pytest.mark.parametrize("res", [32, 64, 128, 256])
def test_toy_skin_region_close_to_ground_truth(res, rng):
    from phenofactor.synthetic import sample_toy_params

    rec = render_toy_face(sample_toy_params(rng), res)
    got = skin_region(rec.segmentation, rec.landmarks, rec.classes).count
    truth = int(rec.ground_truth["skin"].sum())
    assert abs(got - truth) <= 0.05 * truth


def test_hair_region_matches_renderer(toy_records):
    for rec in toy_records:
        assert np.array_equal(hair_region(rec.segmentation).bits, rec.ground_truth["hair"])
    seg = np.zeros((30, 30), int)
    seg[:10] = DEFAULT_CLASSES["hair"]
    assert hair_region(seg).count == 300
    with pytest.raises(EmptyMask):
        hair_region(np.zeros((5, 5), int))


def test_patch_window_examples():
    assert patch_window((128.0, 128.0), 256, 256) == (96, 96)
    assert patch_window((10.0, 10.0), 256, 256) == (0, 0)
    assert patch_window((250.0, 5.0), 256, 256) == (0, 192)
    with pytest.raises(ImageTooSmall):
        patch_window((10.0, 10.0), 63, 256)


@settings(max_examples=50, deadline=None)
@given(cx=st.floats(0, 300), cy=st.floats(0, 300))
def test_patch_is_always_64(cx, cy):
    img = np.zeros((300, 300, 3), np.uint8)
    lm = np.zeros((68, 2))
    lm[27:36] = [cx, cy]
    assert extract_patch(img, lm, "nose").pixels.shape == (PATCH_SIZE, PATCH_SIZE, 3)


def test_patch_color_matches_region():
    params = ToyFaceParams((200, 150, 120), (60, 40, 20), 1.0, 1.0, 1.0, 1.0, (0.0, 0.0), 0)
    rec = render_toy_face(params, 256)
    colors = class_colors(params)
    for region, label in [("nose", DEFAULT_CLASSES["nose"]), ("mouth", DEFAULT_CLASSES["mouth"]),
                          ("left_eye", DEFAULT_CLASSES["eye"])]:
        patch = extract_patch(rec.image, rec.landmarks, region)
        r, c = patch_window(patch.source_center, 256, 256)
        truth = rec.ground_truth[region][r:r + 64, c:c + 64]
        mean = patch.pixels[truth].mean(axis=0)
        assert np.all(np.abs(mean - np.array(colors[label])) <= 10)


def test_missing_landmarks_for_patch():
    with pytest.raises(MissingLandmarks):
        extract_patch(np.zeros((64, 64, 3), np.uint8), np.zeros((20, 2)), "mouth")


def test_compute_phenotype(untrained_embedders):
    params = ToyFaceParams((200, 150, 120), (60, 40, 20), 1.0, 1.1, 0.9, 1.2, (1.0, -1.0), 0)
    rec = render_toy_face(params, 64)
    theta = compute_phenotype(rec, untrained_embedders)
    assert theta.flatten().shape == (512,)
    truth = region_color_stats(rec.image, rec.ground_truth["skin"]).as_array()
    np.testing.assert_allclose(theta.skin, truth, atol=1e-6)
    assert np.all((theta.skin >= 0) & (theta.skin <= 1)) and np.all((theta.hair >= 0) & (theta.hair <= 1))
    again = compute_phenotype(rec, untrained_embedders)
    assert np.array_equal(theta.flatten(), again.flatten())


def test_compute_phenotype_checks_embedder_width(untrained_embedders):
    from phenofactor.embedders import AttributeEmbedder

    rec = render_toy_face(ToyFaceParams((200, 150, 120), (60, 40, 20), 1, 1, 1, 1, (0, 0), 0), 64)
    bad = dict(untrained_embedders, nose=AttributeEmbedder("nose", 10))
    with pytest.raises(EmbedderDimensionMismatch):
        compute_phenotype(rec, bad)


def test_phenotype_vector_roundtrip(rng):
    flat = rng.random(512)
    v = PhenotypeVector.from_flat(flat)
    assert np.array_equal(v.flatten(), flat)
    assert [len(v.block(k)) for k in THETA_DIMS] == [3, 3, 125, 125, 128, 128]
    with pytest.raises(DimensionMismatch):
        PhenotypeVector.from_flat(flat[:-1])
