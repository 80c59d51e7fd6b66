import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import conv2d_loops, transposed_conv2_loops

from claustrum_seg import autodiff as ad
from claustrum_seg.autodiff import BatchNormState, Tape, Tensor, gradient_check
from claustrum_seg.gradcheck import CHECKS, run_checks


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


# ---------------------------------------------------------------- conv


def test_delta_kernel_is_identity():
    x = np.random.default_rng(0).standard_normal((1, 1, 5, 6))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_all_ones_centre_is_nine():
    out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert out.data[0, 0, 1, 1] == 9
    assert out.data[0, 0, 0, 0] == 4  # zero padding at the corner


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x, w, b = rng.standard_normal((2, 3, 5, 7)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b))
    np.testing.assert_allclose(out.data, conv2d_loops(x, w, b), rtol=1e-12, atol=1e-12)


def test_conv_weight_gradient_of_sum():
    rng = np.random.default_rng(2)
    w, b = leaf(rng.standard_normal((2, 3, 3, 3))), leaf(np.zeros(2))
    rep = gradient_check(lambda t: ad.conv2d(t, w, b).sum(), rng.standard_normal((1, 3, 6, 6)), extra=[w, b])
    assert rep.passed, rep.line()


# ---------------------------------------------------------------- pooling / upsampling


def test_maxpool_window():
    out = ad.maxpool2(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
    assert out.data.item() == 4


def test_maxpool_tie_goes_to_first_element():
    x = leaf(np.full((1, 1, 2, 2), 3.0))
    ad.maxpool2(x).sum().backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_maxpool_shape():
    assert ad.maxpool2(Tensor(np.zeros((1, 1, 64, 112)))).shape == (1, 1, 32, 56)


def test_transposed_shape_and_single_support():
    c = 3
    assert ad.transposed_conv2(Tensor(np.zeros((1, c, 8, 14))), Tensor(np.zeros((c, 5, 2, 2))), Tensor(np.zeros(5))).shape == (1, 5, 16, 28)
    k = np.arange(4.0).reshape(1, 1, 2, 2)
    out = ad.transposed_conv2(Tensor(np.array([[[[2.5]]]])), Tensor(k), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data[0, 0], 2.5 * k[0, 0])


def test_transposed_matches_loop_oracle():
    rng = np.random.default_rng(4)
    x, w, b = rng.standard_normal((2, 3, 3, 4)), rng.standard_normal((3, 2, 2, 2)), rng.standard_normal(2)
    out = ad.transposed_conv2(Tensor(x), Tensor(w), Tensor(b))
    np.testing.assert_allclose(out.data, transposed_conv2_loops(x, w, b), rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------- batchnorm / dropout


def test_batchnorm_train_standardizes():
    x = np.random.default_rng(5).standard_normal((4, 3, 6, 6)) * 3 + 2
    st_ = BatchNormState.create(3, dtype=np.float64)
    out = ad.batchnorm(Tensor(x), st_, "train").data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)
    assert np.all(st_.running_var >= 0)


def test_batchnorm_eval_on_standardized_input():
    x = np.random.default_rng(6).standard_normal((2, 2, 4, 4))
    st_ = BatchNormState.create(2, dtype=np.float64)  # running stats 0 / 1
    out = ad.batchnorm(Tensor(x), st_, "eval").data
    np.testing.assert_allclose(out, x, rtol=1e-5, atol=1e-8)  # epsilon shifts by ~5e-6


def test_batchnorm_running_stats_update():
    x = np.random.default_rng(7).standard_normal((2, 1, 4, 4)) + 5
    st_ = BatchNormState.create(1, momentum=0.1, dtype=np.float64)
    ad.batchnorm(Tensor(x), st_, "train")
    assert st_.running_mean[0] == pytest.approx(0.1 * x.mean())
    assert st_.running_var[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1))


def test_dropout_identity_cases():
    x = np.random.default_rng(8).standard_normal((2, 2, 4, 4))
    np.testing.assert_array_equal(ad.dropout(Tensor(x), 0.0, "train", np.random.default_rng(0)).data, x)
    np.testing.assert_array_equal(ad.dropout(Tensor(x), 0.7, "eval").data, x)


def test_dropout_rate_within_three_standard_errors():
    rate, n = 0.3, 100_000
    out = ad.dropout(Tensor(np.ones((1, 1, 250, 400))), rate, "train", np.random.default_rng(42)).data
    frac = np.mean(out == 0)
    assert abs(frac - rate) < 3 * np.sqrt(rate * (1 - rate) / n)
    np.testing.assert_allclose(out[out != 0], 1 / (1 - rate))


def test_dropout_deterministic_per_seed():
    x = Tensor(np.ones((2, 3, 8, 8), dtype=np.float32))
    a = ad.dropout(x, 0.5, "train", np.random.default_rng(1)).data
    b = ad.dropout(x, 0.5, "train", np.random.default_rng(1)).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- elementwise / concat / engine


def test_relu_and_sigmoid_values():
    np.testing.assert_array_equal(ad.relu(Tensor(np.array([-1.0, 2.0]))).data, [0, 2])
    assert ad.sigmoid(Tensor(np.array(0.0))).data == 0.5


@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=50))
def test_activation_ranges(values):
    x = Tensor(np.array(values))
    s = ad.sigmoid(x).data
    assert np.all((s > 0) & (s < 1))
    assert np.all(ad.relu(x).data >= 0)


def test_concat_order_and_gradient():
    a, b = leaf(np.random.default_rng(9).standard_normal((1, 2, 4, 4))), leaf(np.zeros((1, 3, 4, 4)))
    out = ad.concat_channels(a, b)
    assert out.shape == (1, 5, 4, 4)
    np.testing.assert_array_equal(out.data[:, :2], a.data)
    out.sum().backward()
    np.testing.assert_array_equal(a.grad, np.ones_like(a.data))
    np.testing.assert_array_equal(b.grad, np.ones_like(b.data))


def test_backward_simple_losses():
    x = leaf(np.random.default_rng(10).standard_normal((3, 4)))
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))
    x.zero_grad()
    ((x**2).sum() * 0.5).backward()
    np.testing.assert_allclose(x.grad, x.data)


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        ad.backward(leaf(np.ones(3)) * 2)


def test_tape_is_topological_and_shared_nodes_visit_once():
    x = leaf([1.0, 2.0])
    y = x * x
    z = (y + y).sum()  # y reached twice
    tape = Tape.from_loss(z)
    pos = {id(n): i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]
    assert len(pos) == len(tape.nodes)
    ad.backward(z, tape)
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_u_net_shape_algebra():
    x = Tensor(np.zeros((1, 4, 16, 16)))
    w = Tensor(np.zeros((4, 4, 3, 3)))
    b = Tensor(np.zeros(4))
    assert ad.conv2d(x, w, b).shape == (1, 4, 16, 16)
    down = ad.maxpool2(x)
    up = ad.transposed_conv2(down, Tensor(np.zeros((4, 2, 2, 2))), Tensor(np.zeros(2)))
    assert up.shape[2:] == x.shape[2:]
    assert ad.concat_channels(x, up).shape == (1, 6, 16, 16)


# ---------------------------------------------------------------- finite differences


def test_identity_gradient_is_exact():
    rep = gradient_check(lambda t: t * 1.0, np.random.default_rng(0).standard_normal((3, 3)), 1e-10)
    assert rep.max_rel_error < 1e-9


@pytest.mark.parametrize("name", list(CHECKS))
def test_primitive_passes_finite_differences(name):
    (rep,) = run_checks([name])
    assert rep.passed, rep.line()


@pytest.mark.parametrize("name", ["conv2d", "sigmoid", "relu", "batchnorm", "maxpool2"])
def test_injected_fault_is_detected(name):
    with ad.inject_fault(name):
        (rep,) = run_checks([name])
    assert not rep.passed and rep.max_rel_error >= rep.tolerance
    (clean,) = run_checks([name])
    assert clean.passed


def test_unknown_check_name():
    with pytest.raises(KeyError):
        run_checks(["nope"])
