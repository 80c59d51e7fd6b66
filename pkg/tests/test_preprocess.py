import numpy as np
import pytest
from conftest import FIXTURE_CI, FIXTURE_WINDOW, fixture_label
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from claustrum_seg.nifti_io import SliceSample, Volume
from claustrum_seg.preprocess import (
    RoiWindow,
    crop_roi,
    fit_roi_window,
    imbalance_report,
    normalize_array,
    normalize_volume,
    prepare_subject,
    resize_mask,
    resize_slice,
    restore_from_roi,
    select_ci_slices,
)


def sample(image, label=None, idx=0):
    return SliceSample("s", idx, np.asarray(image, dtype=np.float64), None if label is None else np.asarray(label, np.uint8))


# ---------------------------------------------------------------- resize / normalize


def test_resize_identity_at_frame_size():
    s = sample(np.random.default_rng(0).random((256, 256)))
    assert resize_slice(s) is s


@pytest.mark.parametrize("shape", [(218, 364), (311, 260)])
def test_heterogeneous_sizes_reach_frame(shape):
    lab = np.zeros(shape, np.uint8)
    lab[100:110, 150:200] = 1
    out = resize_slice(sample(np.random.default_rng(1).random(shape), lab))
    assert out.image.shape == out.label.shape == (256, 256)
    assert set(np.unique(out.label)) <= {0, 1}
    assert out.provenance["original_shape"] == shape


def test_resize_preserves_constants():
    out = resize_slice(sample(np.full((218, 364), 0.375)))
    np.testing.assert_allclose(out.image, 0.375, atol=1e-12)


def test_resize_mask_back_to_original():
    m = np.zeros((256, 256), np.uint8)
    m[100:140, 50:200] = 1
    back = resize_mask(m, (218, 364))
    assert back.shape == (218, 364) and set(np.unique(back)) <= {0, 1}


def test_min_max_formula():
    np.testing.assert_allclose(normalize_array(np.array([0.0, 5.0, 10.0])), [0, 0.5, 1])
    v = np.array([0.0, 0.3, 1.0])
    np.testing.assert_array_equal(normalize_array(v), v)
    np.testing.assert_array_equal(normalize_array(np.full(4, 7.0)), np.zeros(4))


def test_volume_normalization_is_shared_across_slices():
    slices = [sample(np.full((4, 4), 2.0), idx=0), sample(np.full((4, 4), 4.0), idx=1)]
    out = normalize_volume(slices)
    assert out[0].image.max() == 0.0 and out[1].image.min() == 1.0


@given(hnp.arrays(np.float64, (5, 7), elements=st.floats(-1e6, 1e6)))
def test_normalized_range(values):
    out = normalize_array(values)
    assert out.min() >= 0 and out.max() <= 1


def test_prepare_subject_end_to_end():
    rng = np.random.default_rng(2)
    img = Volume(rng.random((218, 364, 3)) * 900)
    lab = Volume((rng.random((218, 364, 3)) > 0.99).astype(np.uint8))
    out = prepare_subject(img, lab, "x")
    assert len(out) == 3
    assert all(s.image.shape == (256, 256) and s.image.min() >= 0 and s.image.max() <= 1 for s in out)


# ---------------------------------------------------------------- slice selection


def test_select_ci_slices():
    empty = sample(np.zeros((256, 256)), np.zeros((256, 256)))
    full = sample(np.zeros((256, 256)), fixture_label(198), idx=1)
    assert select_ci_slices([empty, full]) == [full]
    assert select_ci_slices([]) == []


# ---------------------------------------------------------------- ROI


def test_fixture_counts_before_and_after_crop(fixture_labels):
    window = RoiWindow(*FIXTURE_WINDOW)
    stats = imbalance_report([sample(np.zeros((256, 256)), lab, i) for i, lab in enumerate(fixture_labels)], window)
    assert [r["ci_pixels_before"] for r in stats.rows] == list(FIXTURE_CI)
    assert [r["bg_pixels_before"] for r in stats.rows] == [65338, 65327, 65349]
    assert [r["ci_pixels_after"] for r in stats.rows] == list(FIXTURE_CI)
    assert [r["bg_pixels_after"] for r in stats.rows] == [6970, 6959, 6981]
    assert 198 / 7168 == pytest.approx(0.027623, abs=1e-6)
    assert 65338 / 6970 == pytest.approx(9.374, abs=1e-3)


def test_crop_of_empty_slice():
    out = crop_roi(sample(np.zeros((256, 256)), np.zeros((256, 256))), RoiWindow(10, 20))
    assert out.label.shape == (64, 112) and not out.label.any()
    assert out.provenance["roi"] == {"row0": 10, "col0": 20, "rows": 64, "cols": 112}


def test_restore_all_ones():
    assert restore_from_roi(np.ones((64, 112), np.uint8), RoiWindow(0, 0)).sum() == 7168


def test_window_must_fit():
    with pytest.raises(ValueError):
        RoiWindow(200, 0).validate()
    with pytest.raises(ValueError):
        RoiWindow(0, 145).validate()


@given(st.integers(0, 192), st.integers(0, 144), st.integers(0, 2**31 - 1))
def test_crop_restore_partial_inverse(row0, col0, seed):
    w = RoiWindow(row0, col0)
    x = (np.random.default_rng(seed).random((256, 256)) > 0.5).astype(np.uint8)
    restored = restore_from_roi(crop_roi(sample(x, x), w).label, w)
    rs, cs = w.slices
    np.testing.assert_array_equal(restored[rs, cs], x[rs, cs])
    outside = np.ones_like(x, bool)
    outside[rs, cs] = False
    assert not restored[outside].any()
    assert restored.sum() == x[rs, cs].sum()


def test_fit_single_pixel_centres_window():
    lab = np.zeros((256, 256), np.uint8)
    lab[128, 128] = 1
    w = fit_roi_window([lab], margin=2)
    assert abs(w.row0 + 32 - 128) <= 1 and abs(w.col0 + 56 - 128) <= 1


def test_fit_box_limits():
    ok = np.zeros((256, 256), np.uint8)
    ok[100:160, 50:150] = 1  # 60x100 + 2*2 margin fits 64x112
    fit_roi_window([ok], margin=2)
    bad = np.zeros((256, 256), np.uint8)
    bad[100:170, 50:150] = 1
    with pytest.raises(ValueError, match="exceeds"):
        fit_roi_window([bad], margin=2)


def test_fit_needs_foreground():
    with pytest.raises(ValueError):
        fit_roi_window([np.zeros((256, 256))])


@given(
    st.lists(
        st.tuples(st.integers(0, 250), st.integers(0, 250), st.integers(1, 40), st.integers(1, 80)), min_size=1, max_size=4
    )
)
def test_fitted_window_preserves_counts(boxes):
    labels = []
    for r, c, h, w in boxes:
        lab = np.zeros((256, 256), np.uint8)
        lab[r : r + h, c : c + w] = 1
        labels.append(lab)
    try:
        win = fit_roi_window(labels, margin=4)
    except ValueError:
        return  # union too large for the window
    stats = imbalance_report([sample(np.zeros((256, 256)), lab, i) for i, lab in enumerate(labels)], win)
    for r in stats.rows:
        assert r["ci_pixels_before"] == r["ci_pixels_after"]
        assert r["ci_pixels_before"] + r["bg_pixels_before"] == 65536
        assert r["ci_pixels_after"] + r["bg_pixels_after"] == 7168


def test_window_json_round_trip():
    w = RoiWindow(3, 4)
    assert RoiWindow.from_dict(w.to_dict()) == w


def test_stats_table_matches_dict(fixture_labels):
    stats = imbalance_report([sample(np.zeros((256, 256)), lab, i) for i, lab in enumerate(fixture_labels)], RoiWindow(*FIXTURE_WINDOW))
    lines = stats.table().splitlines()
    for line, row in zip(lines[1:4], stats.rows):
        assert line.split("\t")[1:] == [str(row[k]) for k in ("ci_pixels_before", "ci_pixels_after", "bg_pixels_before", "bg_pixels_after")]
