import math
import warnings

import numpy as np
import pytest
from conftest import FIXTURE_CI, fixture_label
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from oracles import bce_direct, dice_sets, icc_anova

from claustrum_seg.autodiff import Tensor, gradient_check
from claustrum_seg.metrics import (
    ClassWeights,
    ConfusionCounts,
    compute_class_weights,
    confusion,
    dice,
    dice_per_case,
    icc,
    weighted_bce,
    weighted_bce_tensor,
)

masks = hnp.arrays(np.uint8, hnp.array_shapes(min_dims=2, max_dims=2, max_side=12), elements=st.integers(0, 1))


# ---------------------------------------------------------------- class weights


def test_single_slice_fraction():
    lab = np.zeros((64, 112), np.uint8)
    lab.ravel()[:198] = 1
    cw = compute_class_weights([lab])
    assert cw.w == pytest.approx(198 / 7168) and cw.w == pytest.approx(0.027623, abs=1e-6)
    assert cw.w + cw.one_minus_w == 1


def test_pooled_fraction():
    labs = []
    for c in FIXTURE_CI:
        lab = np.zeros((64, 112), np.uint8)
        lab.ravel()[:c] = 1
        labs.append(lab)
    assert compute_class_weights(labs).w == pytest.approx(sum(FIXTURE_CI) / (3 * 7168))


def test_degenerate_weights_warn():
    with pytest.warns(RuntimeWarning):
        assert compute_class_weights([np.ones((4, 4))]).w == 1
    with pytest.warns(RuntimeWarning):
        assert compute_class_weights([np.zeros((4, 4))]).w == 0


# ---------------------------------------------------------------- weighted BCE


def test_perfect_prediction_near_zero_loss():
    loss, _ = weighted_bce(np.array([1 - 1e-7]), np.array([1.0]), ClassWeights(0.3, 0.7))
    assert loss < 1e-6


def test_half_ln2():
    loss, _ = weighted_bce(np.array([0.5]), np.array([1.0]), ClassWeights(0.5, 0.5))
    assert loss == pytest.approx(0.5 * math.log(2), abs=1e-15)


def test_matches_direct_formula():
    rng = np.random.default_rng(0)
    c = (rng.random(500) < 0.4).astype(np.float64)
    p = rng.random(500)
    w = ClassWeights(0.2, 0.8)
    loss, _ = weighted_bce(p, c, w)
    assert loss == pytest.approx(np.mean([bce_direct(ci, pi, 0.2) for ci, pi in zip(c, p)]), abs=1e-12)


def test_half_weight_is_half_standard_bce():
    rng = np.random.default_rng(1)
    c = (rng.random(100) < 0.5).astype(np.float64)
    p = rng.uniform(0.01, 0.99, 100)
    std = -np.mean(c * np.log(p) + (1 - c) * np.log(1 - p))
    assert weighted_bce(p, c, ClassWeights(0.5, 0.5))[0] == pytest.approx(0.5 * std, rel=1e-12)


@pytest.mark.parametrize("c", [0.0, 1.0])
def test_minimized_at_target(c):
    grid = np.linspace(1e-4, 1 - 1e-4, 2001)
    losses = [weighted_bce(np.array([g]), np.array([c]), ClassWeights(0.3, 0.7))[0] for g in grid]
    best = grid[int(np.argmin(losses))]
    assert best == pytest.approx(c, abs=1e-3)


def test_gradient_finite_differences():
    rng = np.random.default_rng(2)
    p = rng.uniform(0.05, 0.95, (3, 5))
    c = (rng.random((3, 5)) < 0.5).astype(np.float64)
    rep = gradient_check(lambda t: weighted_bce_tensor(t, c, ClassWeights(0.1, 0.9)), p, 1e-6)
    assert rep.passed, rep.line()


def test_clamp_keeps_loss_finite():
    loss, grad = weighted_bce(np.array([0.0, 1.0]), np.array([1.0, 0.0]), ClassWeights(0.5, 0.5))
    assert np.isfinite(loss) and np.all(np.isfinite(grad))


def test_target_must_be_binary():
    with pytest.raises(ValueError):
        weighted_bce(np.array([0.5]), np.array([0.5]), ClassWeights(0.5, 0.5))


def test_tensor_node_value():
    t = Tensor(np.array([0.5]), requires_grad=True)
    assert float(weighted_bce_tensor(t, np.array([1.0]), ClassWeights(0.5, 0.5)).data) == pytest.approx(0.5 * math.log(2))


# ---------------------------------------------------------------- confusion / Dice


def test_confusion_identity_and_complement():
    t = fixture_label(198)
    c = confusion(t, t)
    assert (c.tp, c.fp, c.fn) == (198, 0, 0)
    c = confusion(1 - t, t)
    assert c.tp == 0 and c.tn == 0
    z = np.zeros((5, 5), np.uint8)
    assert confusion(z, z).tn == 25


def test_dice_values():
    assert dice(ConfusionCounts(198, 0, 0, 0)) == 1.0
    assert dice(ConfusionCounts(0, 3, 4, 10)) == 0.0
    assert dice(ConfusionCounts(5, 3, 2, 0)) == 10 / 15
    assert dice(ConfusionCounts(0, 0, 0, 9)) == 1.0


def test_pooled_per_case():
    # slice a: tp 5, fp 3, fn 2; slice b: tp 5 only
    ta = np.zeros(20, np.uint8)
    pa = np.zeros(20, np.uint8)
    ta[:7] = 1
    pa[:5] = 1
    pa[7:10] = 1
    tb = np.zeros(20, np.uint8)
    tb[:5] = 1
    out = dice_per_case({"s": [pa, tb.copy()]}, {"s": [ta, tb]})
    assert out["s"] == pytest.approx(0.8)
    assert out["s"] != pytest.approx((10 / 15 + 1) / 2)


def test_empty_prediction_gives_zero():
    t = fixture_label(187)
    assert dice_per_case({"a": [np.zeros_like(t)]}, {"a": [t]})["a"] == 0.0


@given(masks, st.data())
def test_dice_matches_sets(a, data):
    b = data.draw(hnp.arrays(np.uint8, a.shape, elements=st.integers(0, 1)))
    assert dice(confusion(a, b)) == dice_sets(a, b)


@given(masks, st.data())
def test_dice_symmetric_and_permutation_invariant(a, data):
    b = data.draw(hnp.arrays(np.uint8, a.shape, elements=st.integers(0, 1)))
    perm = np.random.default_rng(data.draw(st.integers(0, 1000))).permutation(a.size)
    d = dice(confusion(a, b))
    assert d == dice(confusion(b, a))
    assert d == dice(confusion(a.ravel()[perm], b.ravel()[perm]))


# ---------------------------------------------------------------- ICC


def test_perfect_agreement_is_exactly_one():
    x = np.repeat(np.arange(1.0, 7.0)[:, None], 2, axis=1)
    r = icc(x)
    assert (r.icc1, r.icc2, r.icc3, r.icc1k, r.icc2k, r.icc3k) == (1.0,) * 6


def test_offset_judge():
    base = np.array([3.0, 8.0, 1.0, 12.0, 5.0, 7.0])
    r = icc(np.stack([base, base + 2.5], axis=1))
    assert r.icc3 == pytest.approx(1.0, abs=1e-12) and r.icc3k == pytest.approx(1.0, abs=1e-12)
    assert r.icc1 < 1 and r.icc2 < 1 and r.icc1k < 1 and r.icc2k < 1


def test_matches_anova_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x = rng.normal(50, 10, (30, 1)) + rng.normal(0, 4, (30, 2))
        r = icc(x).to_dict()
        for key, val in icc_anova(x).items():
            assert r[key] == pytest.approx(val, abs=1e-10)


@given(hnp.arrays(np.float64, (8, 3), elements=st.floats(-100, 100)))
def test_spearman_brown(x):
    r = icc(x)
    if not np.isfinite(r.icc1) or r.mean_squares["BMS"] < 1e-6:
        return
    k = 3
    for single, avg in ((r.icc1, r.icc1k), (r.icc3, r.icc3k)):
        denom = 1 + (k - 1) * single
        if abs(denom) > 1e-6:
            assert avg == pytest.approx(k * single / denom, rel=1e-6, abs=1e-9)


def test_zero_subject_variance():
    r = icc(np.ones((4, 2)))
    assert math.isnan(r.icc1) and r.note
    assert r.to_dict()["ICC1"] is None


def test_shape_errors():
    with pytest.raises(ValueError):
        icc(np.ones((1, 2)))
    with pytest.raises(ValueError):
        icc(np.array([[1.0, np.nan], [2.0, 3.0]]))


def test_table_row_labels():
    d = icc(np.array([[1.0, 2.0], [3.0, 3.5], [6.0, 5.0]])).to_dict()
    for key in ("ICC1", "ICC2", "ICC3", "ICC1k", "ICC2k", "ICC3k"):
        assert key in d and key in d["types"]
    assert d["n_judges"] == 2
