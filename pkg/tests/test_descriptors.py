import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import is_uniform, naive_dense_sift_descriptor, naive_lbp_codes, nearest_linear_scan
from posterlab.codebook import Codebook
from posterlab.descriptors import (
    COHOG_DIM,
    COHOG_OFFSETS,
    EXPRESSIONS,
    GIST_DIM,
    GIST_ORIENTATIONS,
    GIST_PEAK_FREQUENCIES,
    AnnotationError,
    FaceAnnotation,
    FeatureVector,
    bof_histogram,
    channel_dim,
    cohog,
    crop_faces,
    dense_grid,
    dense_sift,
    ecohog,
    emotion_histogram,
    extract_channel,
    gist,
    gist_filter_bank,
    hog,
    hog_cells,
    lab_histogram,
    lbp_codes,
    lbp_histogram,
    load_external_features,
    load_face_annotations,
    sift_bof,
    write_external_features,
)
from posterlab.imageops import rgb_to_lab

gray_images = arrays(np.uint8, st.tuples(st.integers(3, 24), st.integers(3, 24)))


def ramp(h=32, w=32):
    return np.tile(np.arange(w, dtype=np.float64) * 3, (h, 1))


# --- Lab -------------------------------------------------------------------


def test_lab_uniform_gray_one_bin_per_block():
    lab = rgb_to_lab(np.full((10, 10, 3), 128, dtype=np.uint8))
    hist = lab_histogram(lab)
    assert hist.shape == (90,)
    for b in range(3):
        block = hist[30 * b : 30 * (b + 1)]
        assert np.count_nonzero(block) == 1 and block.max() == 1.0


def test_lab_half_black_half_white():
    img = np.zeros((10, 10, 3), dtype=np.uint8)
    img[:, 5:] = 255
    hist = lab_histogram(rgb_to_lab(img))
    assert sorted(hist[:30][hist[:30] > 0]) == [0.5, 0.5]
    assert hist[0] == 0.5 and hist[29] == 0.5
    assert np.count_nonzero(hist[30:60]) == 1 and np.count_nonzero(hist[60:]) == 1


def test_lab_empty():
    with pytest.raises(ValueError):
        lab_histogram(np.zeros((0, 3)))


@settings(max_examples=30)
@given(arrays(np.uint8, st.tuples(st.integers(1, 8), st.integers(1, 8), st.just(3))))
def test_lab_blocks_normalized(img):
    hist = lab_histogram(rgb_to_lab(img))
    np.testing.assert_allclose(hist.reshape(3, 30).sum(axis=1), 1.0, atol=1e-9)


# --- LBP -------------------------------------------------------------------


def test_lbp_constant_image():
    hist = lbp_histogram(np.full((8, 8), 77, dtype=np.uint8))
    assert hist[0] == 1.0 and hist.sum() == 1.0


def test_lbp_offset_invariance():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 200, size=(20, 20)).astype(np.uint8)
    np.testing.assert_array_equal(lbp_histogram(img + 10), lbp_histogram(img))


def test_lbp_step_edge_matches_naive_oracle():
    img = np.zeros((12, 15), dtype=np.uint8)
    img[:, 7:] = 200
    codes = naive_lbp_codes(img)
    uniform = sorted(c for c in range(256) if is_uniform(c))
    expected = np.zeros(59)
    for c in codes:
        expected[uniform.index(c) if is_uniform(c) else 58] += 1
    np.testing.assert_allclose(lbp_histogram(img), expected / len(codes))


@settings(max_examples=40)
@given(gray_images)
def test_lbp_codes_match_oracle(img):
    assert lbp_codes(img).ravel().tolist() == naive_lbp_codes(img)
    assert lbp_histogram(img).sum() == pytest.approx(1.0, abs=1e-12)


def test_lbp_too_small():
    with pytest.raises(ValueError):
        lbp_histogram(np.zeros((2, 9), dtype=np.uint8))


# --- HOG -------------------------------------------------------------------


def test_hog_constant_is_zero():
    assert not np.any(hog(np.full((32, 24), 9, dtype=np.uint8)))


def test_hog_ramp_energy_in_bin_zero():
    cells = hog_cells(ramp())
    assert np.all(cells[..., 1:] == 0)
    assert np.all(cells[..., 0] > 0)


def test_hog_dims():
    assert hog(np.zeros((24, 32), dtype=np.uint8)).shape == ((32 // 8 - 1) * (24 // 8 - 1) * 36,)
    with pytest.raises(ValueError):
        hog_cells(np.zeros((20, 16)))


# --- CoHOG -----------------------------------------------------------------


def test_cohog_offset_set():
    assert len(COHOG_OFFSETS) == 31
    assert COHOG_OFFSETS[0] == (0, 0)
    assert len(set(COHOG_OFFSETS)) == 31
    # no offset is the negation of another
    assert not {(-dx, -dy) for dx, dy in COHOG_OFFSETS[1:]}.intersection(COHOG_OFFSETS)


def test_cohog_constant_is_zero():
    assert not np.any(cohog(np.full((16, 16), 50.0)))
    assert not np.any(ecohog(np.full((16, 16), 50.0)))


def test_cohog_ramp_concentrates_on_bin_pair_zero():
    hist = cohog(ramp()).reshape(4, 31, 64)
    np.testing.assert_allclose(hist[:, 0, 0], 1.0)
    assert hist.shape[0] * hist.shape[1] * hist.shape[2] == COHOG_DIM


@settings(max_examples=20, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(8, 20), st.integers(8, 20))))
def test_cohog_blocks_normalized(img):
    for vec in (cohog(img), ecohog(img)):
        sums = vec.reshape(4, 31, 64).sum(axis=2)
        assert np.all((np.abs(sums - 1) < 1e-9) | (sums == 0))


# --- GIST ------------------------------------------------------------------


def test_gist_constant_is_zero():
    assert not np.any(gist(np.full((256, 256), 100.0)))


def test_gist_filters_zero_at_dc_and_even():
    bank = gist_filter_bank(32, 32)
    assert np.all(bank[:, 0, 0] == 0)
    flipped = np.roll(bank[:, ::-1, ::-1], 1, axis=(1, 2))
    np.testing.assert_allclose(flipped, bank, atol=1e-12)


def test_gist_grating_selects_orientation():
    f0 = GIST_PEAK_FREQUENCIES[1]
    x = np.arange(256)
    grating = np.tile(128 + 100 * np.sin(2 * np.pi * f0 * x), (256, 1))
    energies = gist(grating) ** 2
    scale1_orient0 = (1 * GIST_ORIENTATIONS + 0) * 16
    share = energies[scale1_orient0 : scale1_orient0 + 16].sum() / energies.sum()
    assert share > 0.8


@settings(max_examples=10, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(8, 40), st.integers(8, 40))))
def test_gist_unit_norm(img):
    v = gist(img)
    assert v.shape == (GIST_DIM,)
    n = np.linalg.norm(v)
    assert n == 0 or abs(n - 1) < 1e-9


# --- SIFT / BoF ------------------------------------------------------------


def test_dense_sift_matches_naive_descriptor():
    rng = np.random.default_rng(3)
    img = rng.integers(0, 256, size=(48, 64)).astype(np.float64)
    desc = dense_sift(img)
    corners = dense_grid(64, 48)
    assert desc.shape == (len(corners), 128)
    for i in (0, len(corners) // 2, len(corners) - 1):
        x0, y0 = corners[i]
        np.testing.assert_allclose(desc[i], naive_dense_sift_descriptor(img, x0, y0), atol=1e-9)


def test_bof_single_word():
    rng = np.random.default_rng(4)
    book = Codebook(rng.random((1, 128)))
    assert sift_bof(rng.integers(0, 256, size=(64, 64)).astype(np.float64), book).tolist() == [1.0]


def test_bof_constant_image_is_one_hot():
    rng = np.random.default_rng(5)
    centroids = rng.random((6, 128))
    centroids[4] = 0.0
    hist = sift_bof(np.full((64, 64), 30.0), Codebook(centroids))
    assert hist.tolist() == [0, 0, 0, 0, 1, 0]


def test_bof_matches_exhaustive_assignment():
    rng = np.random.default_rng(6)
    centroids = np.stack([np.zeros(128), np.ones(128)])
    desc = np.concatenate([rng.normal(0, 0.3, (7, 128)), rng.normal(1, 0.3, (5, 128))])
    expected = np.bincount([nearest_linear_scan(centroids, d) for d in desc], minlength=2) / 12
    np.testing.assert_allclose(bof_histogram(desc, Codebook(centroids)), expected)


def test_bof_needs_codebook():
    with pytest.raises(ValueError):
        bof_histogram(np.zeros((3, 128)), None)


# --- emotion ---------------------------------------------------------------


def test_emotion_examples():
    assert not np.any(emotion_histogram([], (100, 100)))
    hist = emotion_histogram([FaceAnnotation((20, 20, 10, 10), "happiness")], (100, 100))
    assert np.flatnonzero(hist).tolist() == [1] and hist[1] == 1.0
    two = emotion_histogram(
        [FaceAnnotation((70, 10, 10, 10), "sadness"), FaceAnnotation((60, 30, 10, 10), "anger")], (100, 100)
    )
    assert np.flatnonzero(two).tolist() == [11, 12]
    assert two[11] == two[12] == 0.5


def test_emotion_global_normalization():
    faces = [FaceAnnotation((0, 0, 4, 4), "fear"), FaceAnnotation((90, 90, 4, 4), "fear"),
             FaceAnnotation((91, 91, 4, 4), "neutral")]
    hist = emotion_histogram(faces, (100, 100), normalize="global")
    assert hist.sum() == pytest.approx(1.0)
    assert hist[6] == pytest.approx(1 / 3) and hist[24 + 6] == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        emotion_histogram(faces, (100, 100), normalize="other")


def test_emotion_bbox_outside_image():
    with pytest.raises(AnnotationError):
        emotion_histogram([FaceAnnotation((200, 200, 5, 5), "fear")], (100, 100))


def test_face_annotation_validation(tmp_path):
    with pytest.raises(AnnotationError):
        FaceAnnotation((0, 0, 1, 1), "joy")
    path = tmp_path / "faces.json"
    path.write_text(json.dumps({"faces": [{"bbox": [1, 2, 3, 4], "expression": "Anger"}]}))
    assert load_face_annotations(path) == [FaceAnnotation((1.0, 2.0, 3.0, 4.0), "anger")]
    path.write_text("[1, 2]")
    with pytest.raises(AnnotationError):
        load_face_annotations(path)


def test_crop_faces_remaps_coordinates():
    faces = [FaceAnnotation((60, 10, 10, 10), "surprise"), FaceAnnotation((5, 5, 4, 4), "fear")]
    assert crop_faces(faces, (50, 0, 50, 50)) == [FaceAnnotation((10, 10, 10, 10), "surprise")]


@settings(max_examples=40)
@given(st.lists(st.tuples(st.floats(0, 95), st.floats(0, 95), st.sampled_from(EXPRESSIONS)), max_size=8))
def test_emotion_blocks_normalized(layout):
    faces = [FaceAnnotation((x, y, 5, 5), e) for x, y, e in layout]
    sums = emotion_histogram(faces, (100, 100)).reshape(4, 8).sum(axis=1)
    assert np.all((np.abs(sums - 1) < 1e-12) | (sums == 0))
    assert int(np.sum(sums > 0)) == len({2 * (y + 2.5 >= 50) + (x + 2.5 >= 50) for x, y, _ in layout})


# --- dispatch and external features ----------------------------------------


@pytest.mark.parametrize("channel", ["lab", "lbp", "hog", "cohog", "ecohog", "gist", "emotion"])
def test_channel_dims(channel):
    img = np.random.default_rng(1).integers(0, 256, size=(30, 20, 3), dtype=np.uint8)
    assert extract_channel(channel, img).shape == (channel_dim(channel),)


def test_channel_dispatch_errors():
    img = np.zeros((8, 8, 3), dtype=np.uint8)
    with pytest.raises(ValueError):
        extract_channel("colour", img)
    with pytest.raises(ValueError):
        channel_dim("siftbof")
    assert channel_dim("siftbof", 17) == 17


def test_external_features_round_trip(tmp_path):
    vectors = [FeatureVector("cnn", "a", np.array([0.5, 1.5, -2.0])), FeatureVector("cnn", "b", np.zeros(3))]
    write_external_features(tmp_path / "x.pfv", vectors)
    back = load_external_features(tmp_path / "x.pfv")
    assert [v.poster_id for v in back] == ["a", "b"]
    np.testing.assert_array_equal(back[0].values, vectors[0].values)
