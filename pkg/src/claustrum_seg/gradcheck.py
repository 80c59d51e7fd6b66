"""Finite-difference verification of every autodiff primitive and a small U-Net."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor, gradient_check
from .metrics import ClassWeights, weighted_bce_tensor
from .unet import UNetConfig, build_model, forward

PRIMITIVE_TOL = 1e-4
SMOOTH_TOL = 1e-6  # sigmoid and the weighted BCE
NETWORK_TOL = 1e-3


def _param(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def check_conv2d(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w, b = _param(rng, 4, 3, 3, 3), _param(rng, 4)
    return gradient_check(lambda t: ad.conv2d(t, w, b), x, PRIMITIVE_TOL, extra=[w, b], name="conv2d")


def check_maxpool2(rng):
    x = rng.standard_normal((2, 4, 8, 8))
    return gradient_check(ad.maxpool2, x, PRIMITIVE_TOL, name="maxpool2")


def check_transposed_conv2(rng):
    x = rng.standard_normal((2, 4, 4, 4))
    w, b = _param(rng, 4, 3, 2, 2), _param(rng, 3)
    return gradient_check(lambda t: ad.transposed_conv2(t, w, b), x, PRIMITIVE_TOL, extra=[w, b], name="transposed_conv2")


def check_batchnorm(rng, mode="train"):
    x = rng.standard_normal((2, 4, 8, 8)) * 2 + 0.5
    st = BatchNormState.create(4, dtype=np.float64)
    st.gamma.data[:] = rng.uniform(0.5, 1.5, 4)
    st.beta.data[:] = rng.standard_normal(4)
    st.running_mean[:] = rng.standard_normal(4)
    st.running_var[:] = rng.uniform(0.5, 2.0, 4)
    # every output moves with every input through the batch statistics, so the
    # rounding noise of a difference is summed over the whole tensor: use a wider step
    return gradient_check(
        lambda t: ad.batchnorm(t, st, mode),
        x,
        PRIMITIVE_TOL,
        extra=[st.gamma, st.beta],
        step=1e-3,
        name=f"batchnorm[{mode}]",
    )


def check_dropout(rng):
    x = rng.standard_normal((2, 4, 8, 8))
    # a fresh generator per call keeps the mask fixed across evaluations
    return gradient_check(
        lambda t: ad.dropout(t, 0.3, "train", np.random.default_rng(5)), x, PRIMITIVE_TOL, name="dropout"
    )


def check_relu(rng):
    x = rng.standard_normal((2, 4, 8, 8))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    return gradient_check(ad.relu, x, PRIMITIVE_TOL, name="relu")


def check_sigmoid(rng):
    x = rng.standard_normal((2, 4, 8, 8)) * 3
    return gradient_check(ad.sigmoid, x, SMOOTH_TOL, name="sigmoid")


def check_concat(rng):
    a = rng.standard_normal((2, 2, 8, 8))
    b = _param(rng, 2, 3, 8, 8)
    return gradient_check(lambda t: ad.concat_channels(t, b), a, PRIMITIVE_TOL, extra=[b], name="concat_channels")


def check_weighted_bce(rng):
    p = rng.uniform(0.05, 0.95, (2, 1, 8, 8))
    c = (rng.random((2, 1, 8, 8)) < 0.3).astype(np.float64)
    w = ClassWeights(0.03, 0.97)
    return gradient_check(lambda t: weighted_bce_tensor(t, c, w), p, SMOOTH_TOL, name="weighted_bce")


def check_unet(rng, depth: int = 2, base: int = 2, size: int = 8, step: float = 1e-6, margin: float = 5e-4):
    """Check the full network loss at an operating point clear of every switch.

    Inputs are redrawn until no ReLU input or max-pool gap lies within
    ``margin`` of a kink, so the stencil (extent ``2 * step``) cannot cross one.
    """
    model = build_model(UNetConfig(depth=depth, base_channels=base, dropout_rate=0.1, seed=3), dtype=np.float64)
    w = ClassWeights(0.2, 0.8)
    params = [t for _, t in model.parameters()]

    def loss_for(y):
        return lambda t: weighted_bce_tensor(forward(model, t, "train", rng=np.random.default_rng(11)), y, w)

    for _ in range(50):
        x = rng.random((2, 1, size, size))
        y = (rng.random((2, 1, size, size)) < 0.2).astype(np.float64)
        with ad.record_kink_margins() as margins:
            loss_for(y)(Tensor(x))
        if min(margins.values()) > margin:
            break
    else:
        raise RuntimeError("no operating point clear of ReLU/max-pool switches found")
    return gradient_check(loss_for(y), x, NETWORK_TOL, extra=params, step=step, name=f"unet[depth={depth}]")


CHECKS = {
    "conv2d": check_conv2d,
    "maxpool2": check_maxpool2,
    "transposed_conv2": check_transposed_conv2,
    "batchnorm": check_batchnorm,
    "batchnorm_eval": lambda rng: check_batchnorm(rng, "eval"),
    "dropout": check_dropout,
    "relu": check_relu,
    "sigmoid": check_sigmoid,
    "concat_channels": check_concat,
    "weighted_bce": check_weighted_bce,
    "unet": check_unet,
}


def run_checks(names=None, seed: int = 0):
    """Run the named checks (all by default) and return their reports in order."""
    names = list(CHECKS) if not names else names
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise KeyError(f"unknown checks: {unknown}; choose from {sorted(CHECKS)}")
    return [CHECKS[n](np.random.default_rng([seed, i])) for i, n in enumerate(names)]
