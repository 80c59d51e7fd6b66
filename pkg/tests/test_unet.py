import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import unet_parameter_count

from claustrum_seg import autodiff as ad
from claustrum_seg.metrics import ClassWeights, weighted_bce_tensor
from claustrum_seg.train import AdamState, TrainConfig, adam_step
from claustrum_seg.unet import (
    CheckpointError,
    UNetConfig,
    build_model,
    checkpoint_bytes,
    checkpoint_from_bytes,
    forward,
    load_checkpoint,
    predict_mask,
    predict_proba,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def small():
    return build_model(UNetConfig(depth=2, base_channels=4, seed=1))


def test_channel_ladder():
    assert UNetConfig(depth=4, base_channels=32).channel_ladder() == [32, 64, 128, 256, 512]


@pytest.mark.parametrize("depth, base", [(1, 1), (2, 4), (4, 32), (3, 16)])
def test_parameter_count_closed_form(depth, base):
    assert build_model(UNetConfig(depth=depth, base_channels=base)).parameter_count == unet_parameter_count(depth, base)


def test_same_seed_same_parameters():
    a, b = build_model(UNetConfig(seed=5, base_channels=4)), build_model(UNetConfig(seed=5, base_channels=4))
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert [n for n, _ in a.parameters()] == [n for n, _ in b.parameters()]


def test_all_parameters_finite_after_init():
    m = build_model(UNetConfig(base_channels=8))
    assert all(np.all(np.isfinite(t.data)) for _, t in m.parameters())


@pytest.mark.parametrize("shape", [(1, 1, 64, 112), (2, 1, 256, 256)])
def test_output_shape_matches_input(shape):
    m = build_model(UNetConfig(depth=4, base_channels=2))
    out = forward(m, np.random.default_rng(0).random(shape, dtype=np.float32), "eval").data
    assert out.shape == shape
    assert np.all((out > 0) & (out < 1))


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3))
def test_same_padding_property(depth, hm, wm):
    m = build_model(UNetConfig(depth=depth, base_channels=1))
    f = 2**depth
    x = np.zeros((1, 1, f * hm, f * wm), dtype=np.float32)
    assert forward(m, x, "eval").shape == x.shape


def test_rejects_indivisible_input(small):
    with pytest.raises(ValueError, match="divisible"):
        forward(small, np.zeros((1, 1, 30, 32), dtype=np.float32))
    with pytest.raises(ValueError):
        forward(small, np.zeros((1, 2, 32, 32), dtype=np.float32))


def test_eval_is_deterministic(small):
    x = np.random.default_rng(2).random((2, 1, 32, 32), dtype=np.float32)
    assert predict_proba(small, x).tobytes() == predict_proba(small, x).tobytes()


def test_threshold_rule(small):
    x = np.random.default_rng(3).random((1, 1, 32, 32), dtype=np.float32)
    p = predict_proba(small, x)
    np.testing.assert_array_equal(predict_mask(small, x, 0.5), (p > 0.5).astype(np.uint8))
    assert predict_mask(small, x, 0.0).all()
    assert predict_mask(small, x).dtype == np.uint8


def test_checkpoint_round_trip(tmp_path, small):
    x = np.random.default_rng(4).random((2, 1, 32, 32), dtype=np.float32)
    path = tmp_path / "m.unet"
    save_checkpoint(small, path)
    back = load_checkpoint(path)
    assert back.config == small.config
    assert predict_proba(back, x).tobytes() == predict_proba(small, x).tobytes()
    assert not list(tmp_path.glob(".*tmp"))


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda b: b"XNET" + b[4:], "magic"),
        (lambda b: b[:4] + b"\x09" + b[5:], "version"),
        (lambda b: b[:-3], "truncated"),
        (lambda b: b + b"\x00", "trailing"),
    ],
)
def test_tampered_checkpoint(small, mutate, message):
    with pytest.raises(CheckpointError, match=message):
        checkpoint_from_bytes(mutate(checkpoint_bytes(small)))


def test_one_small_step_decreases_loss():
    m = build_model(UNetConfig(depth=2, base_channels=4, dropout_rate=0.0, seed=2))
    rng = np.random.default_rng(0)
    x = rng.random((1, 1, 16, 16), dtype=np.float32)
    y = (rng.random((1, 1, 16, 16)) < 0.2).astype(np.float32)
    w = ClassWeights(0.2, 0.8)
    params = [t for _, t in m.parameters()]
    cfg = TrainConfig(learning_rate=1e-4, l2_lambda=0.0)
    # BN in train mode with a single sample still gives a well-defined loss
    before = float(weighted_bce_tensor(forward(m, x, "train"), y, w).data)
    m.zero_grad()
    ad.backward(weighted_bce_tensor(forward(m, x, "train"), y, w))
    adam_step(params, [p.grad for p in params], AdamState.zeros_like(params), cfg)
    after = float(weighted_bce_tensor(forward(m, x, "train"), y, w).data)
    assert after < before


def test_skip_shapes_agree_at_every_level():
    m = build_model(UNetConfig(depth=3, base_channels=2))
    # any mismatch in concat would raise inside forward
    assert forward(m, np.zeros((1, 1, 24, 40), dtype=np.float32), "eval").shape == (1, 1, 24, 40)
