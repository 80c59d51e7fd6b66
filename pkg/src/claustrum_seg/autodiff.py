"""Rank-4 (N, C, H, W) numpy tensors with reverse-mode differentiation.

Every differentiable op builds an output ``Tensor`` that remembers its parents
and a closure mapping the output gradient to parent gradients. ``backward``
orders the graph topologically into a ``Tape`` and runs the closures once each
in reverse. Arithmetic follows the dtype of the inputs: float32 for training,
float64 for finite-difference checks.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# names of ops whose backward rule is deliberately corrupted (negative-control hook)
_FAULTS: set[str] = set()


@contextlib.contextmanager
def inject_fault(*names: str):
    """Temporarily corrupt the backward rule of the named ops (test-only)."""
    added = set(names) - _FAULTS
    _FAULTS.update(added)
    try:
        yield
    finally:
        _FAULTS.difference_update(added)


# smallest distance to a non-differentiable switch seen per op, while recording
_MARGINS: dict[str, float] | None = None


@contextlib.contextmanager
def record_kink_margins():
    """Collect, per op, how close the forward pass came to a ReLU or max-pool switch."""
    global _MARGINS
    prev, _MARGINS = _MARGINS, {}
    try:
        yield _MARGINS
    finally:
        _MARGINS = prev


def _note_margin(op: str, value: float) -> None:
    if _MARGINS is not None:
        _MARGINS[op] = min(_MARGINS.get(op, np.inf), float(value))


def _fault(name: str, grad: np.ndarray) -> np.ndarray:
    return grad * 1.05 + 1e-3 if name in _FAULTS else grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op or 'leaf'!r})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward_fn, op) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (), _backward=backward_fn if needs else None, op=op)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


@dataclass
class Tape:
    """Operations reachable from a loss, parents before children."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf with requires_grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return tape


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def power(a: Tensor, exponent: float) -> Tensor:
    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(a.data**exponent, (a,), bw, "pow")


def tsum(a: Tensor) -> Tensor:
    def bw(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make(a.data.sum(keepdims=False).reshape(()), (a,), bw, "sum")


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        return (np.full(a.shape, g / n, dtype=a.dtype),)

    return _make(a.data.mean().reshape(()), (a,), bw, "mean")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _MARGINS is not None and x.data.size:
        _note_margin("relu", np.min(np.abs(x.data)))

    def bw(g):
        return (_fault("relu", g * mask),)

    return _make(np.maximum(x.data, 0), (x,), bw, "relu")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clipped so every output is strictly inside (0, 1)."""
    d = x.data if x.dtype.kind == "f" else x.data.astype(np.float64)
    e = np.exp(-np.abs(d))
    s = np.array(1.0 / (1.0 + e), dtype=d.dtype)
    neg = d < 0
    s[neg] = e[neg] * s[neg]
    info = np.finfo(d.dtype)
    np.clip(s, info.tiny, np.nextafter(d.dtype.type(1), d.dtype.type(0)), out=s)

    def bw(g):
        return (_fault("sigmoid", g * s * (1 - s)),)

    return _make(s, (x,), bw, "sigmoid")


# ---------------------------------------------------------------- layers


def _check_rank4(x: Tensor, name: str):
    if x.data.ndim != 4:
        raise ValueError(f"{name} expects an (N, C, H, W) tensor, got shape {x.shape}")


def _nhwc(a: np.ndarray) -> np.ndarray:
    return a.transpose(0, 2, 3, 1)


def _nchw(a: np.ndarray) -> np.ndarray:
    return a.transpose(0, 3, 1, 2)


def _im2col(a: np.ndarray) -> np.ndarray:
    """(N, H, W, C) -> (N*H*W, 9*C) rows of zero-padded 3x3 neighbourhoods, ordered (ky, kx, c)."""
    n, h, w, c = a.shape
    ap = np.zeros((n, h + 2, w + 2, c), dtype=a.dtype)
    ap[:, 1:-1, 1:-1] = a
    win = sliding_window_view(ap, (3, 3), axis=(1, 2))  # (N, H, W, C, 3, 3)
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, 9 * c)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, one ring of zero padding (H and W preserved).

    Arrays are NCHW views over channels-last memory so im2col rows are contiguous.
    """
    _check_rank4(x, "conv2d")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if (kh, kw) != (3, 3):
        raise ValueError(f"conv2d kernel must be 3x3, got {kh}x{kw}")
    if c != c_in:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernel expects {c_in}")
    cols = _im2col(_nhwc(x.data))
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(c_out, 9 * c)
    out = cols @ wmat.T
    out += bias.data
    out = _nchw(out.reshape(n, h, w, c_out))

    def bw(g):
        gm = _nhwc(g).reshape(n * h * w, c_out)
        gw = _fault("conv2d", (gm.T @ cols).reshape(c_out, 3, 3, c).transpose(0, 3, 1, 2))
        gb = gm.sum(axis=0)
        gx = None
        if x.requires_grad:
            # input gradient = same-padded correlation of g with the flipped, channel-swapped kernel
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, 9 * c_out)
            gx = _nchw((_im2col(_nhwc(g)) @ wflip.T).reshape(n, h, w, c))
        return gx, gw, gb

    return _make(out, (x, weight, bias), bw, "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2; gradient goes to the first maximum in row-major order."""
    _check_rank4(x, "maxpool2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    # (N, Ho, Wo, C, 4) with the window flattened row-major
    win = _nhwc(x.data).reshape(n, ho, 2, wo, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    if _MARGINS is not None and win.size:
        # ties at exactly zero come from clamped inputs with no gradient to route
        top2 = np.sort(win, axis=-1)[..., -2:]
        live = top2[..., 1] != 0
        if live.any():
            _note_margin("maxpool2", np.min((top2[..., 1] - top2[..., 0])[live]))

    def bw(g):
        gwin = np.zeros((n, ho, wo, c, 4), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], _fault("maxpool2", _nhwc(g))[..., None], axis=-1)
        gx = gwin.reshape(n, ho, wo, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (_nchw(gx),)

    return _make(_nchw(out), (x,), bw, "maxpool2")


def transposed_conv2(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-2 2x2 transposed convolution; weight is (C_in, C_out, 2, 2)."""
    _check_rank4(x, "transposed_conv2")
    n, c, h, w = x.shape
    c_in, c_out, kh, kw = weight.shape
    if (kh, kw) != (2, 2):
        raise ValueError(f"transposed_conv2 kernel must be 2x2, got {kh}x{kw}")
    if c != c_in:
        raise ValueError(f"transposed_conv2 channel mismatch: input has {c}, kernel expects {c_in}")
    xm = _nhwc(x.data).reshape(n * h * w, c)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(c_in, 4 * c_out)  # columns ordered (a, b, o)
    out = (xm @ wmat).reshape(n, h, w, 2, 2, c_out).transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * w, c_out)
    out += bias.data

    def bw(g):
        gm = _nhwc(g).reshape(n, h, 2, w, 2, c_out).transpose(0, 1, 3, 2, 4, 5).reshape(n * h * w, 4 * c_out)
        gw = _fault("transposed_conv2", (xm.T @ gm).reshape(c_in, 2, 2, c_out).transpose(0, 3, 1, 2))
        gb = g.sum(axis=(0, 2, 3))
        gx = _nchw((gm @ wmat.T).reshape(n, h, w, c)) if x.requires_grad else None
        return gx, gw, gb

    return _make(_nchw(out), (x, weight, bias), bw, "transposed_conv2")


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, epsilon: float = 1e-5, dtype=np.float32):
        if epsilon <= 0:
            raise ValueError("batchnorm epsilon must be positive")
        if not 0 < momentum < 1:
            raise ValueError("batchnorm momentum must be in (0, 1)")
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )


def batchnorm(x: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel normalization over (N, H, W).

    Train mode uses batch statistics (biased variance) and folds them into the
    running estimates (unbiased variance); eval mode uses the running estimates.
    """
    _check_rank4(x, "batchnorm")
    n, c, h, w = x.shape
    if c != state.gamma.shape[0]:
        raise ValueError(f"batchnorm channel mismatch: input has {c}, state has {state.gamma.shape[0]}")
    m = n * h * w
    if m == 0:
        raise ValueError("batchnorm on an empty batch")
    gamma = state.gamma.data[None, :, None, None]
    beta = state.beta.data[None, :, None, None]
    if mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        mom = state.momentum
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean
        unbiased = var * (m / (m - 1)) if m > 1 else var
        state.running_var[...] = (1 - mom) * state.running_var + mom * unbiased
    elif mode == "eval":
        mean, var = state.running_mean, state.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + state.epsilon)).astype(x.dtype)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma * xhat + beta

    def bw(g):
        ggamma = _fault("batchnorm", (g * xhat).sum(axis=(0, 2, 3)))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * gamma
        if mode == "train":
            s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            gx = inv_std[None, :, None, None] / m * (m * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * inv_std[None, :, None, None]
        return gx, ggamma, gbeta

    return _make(out.astype(x.dtype, copy=False), (x, state.gamma, state.beta), bw, "batchnorm")


def dropout(x: Tensor, rate: float, mode: str = "train", rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors scaled by 1/(1-rate) at train time, identity at eval."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    if x.data.ndim == 4:
        u = _nchw(rng.random(_nhwc(x.data).shape, dtype=np.float32))
    else:
        u = rng.random(x.shape, dtype=np.float32)
    keep = (u >= rate).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))

    def bw(g):
        return (_fault("dropout", g * keep),)

    return _make(x.data * keep, (x,), bw, "dropout")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a``'s channels followed by ``b``'s."""
    _check_rank4(a, "concat_channels")
    _check_rank4(b, "concat_channels")
    if (a.shape[0], *a.shape[2:]) != (b.shape[0], *b.shape[2:]):
        raise ValueError(f"concat_channels shape mismatch: {a.shape} vs {b.shape}")
    ca = a.shape[1]

    def bw(g):
        g = _fault("concat_channels", g)
        return g[:, :ca], g[:, ca:]

    out = np.concatenate([_nhwc(a.data), _nhwc(b.data)], axis=3)
    return _make(_nchw(out), (a, b), bw, "concat")


# ---------------------------------------------------------------- verification


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    tolerance: float
    n_checked: int
    passed: bool
    n_skipped: int = 0  # coordinates whose perturbation crossed a kink

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        skipped = f", {self.n_skipped} at kinks" if self.n_skipped else ""
        return (
            f"{status} {self.name}: max rel err {self.max_rel_error:.3e} "
            f"(tol {self.tolerance:.0e}, {self.n_checked} coords{skipped})"
        )


def gradient_check(
    f: Callable[[Tensor], Tensor],
    point,
    tolerance: float = 1e-4,
    *,
    extra: Sequence[Tensor] = (),
    max_checks: int | None = None,
    floor: float = 1e-6,
    step: float = 1e-4,
    skip_kinks: bool = False,
    max_kink_fraction: float = 0.01,
    seed: int = 0,
    name: str = "",
) -> GradCheckReport:
    """Compare reverse-mode gradients with fourth-order central differences.

    ``f`` maps a float64 tensor built from ``point`` to any tensor; its output is
    reduced to a scalar by a fixed random projection. Gradients w.r.t. ``point``
    and every tensor in ``extra`` (perturbed in place) are checked. The error per
    coordinate is ``|a - n| / max(|a|, |n|, floor)`` and the step is
    ``step * max(1, |x|)``. The five-point stencil lets the step be large
    enough that rounding noise stays well below small gradient entries.

    With ``skip_kinks`` a coordinate is excluded when its central differences at
    ``h`` and ``2h`` disagree by more than ``10 * tolerance`` (relative), which
    only happens when a ReLU or max-pool switch lies inside the stencil. The
    forward pass decides this, so a wrong backward rule cannot hide behind it.
    The check fails if more than ``max_kink_fraction`` of coordinates are skipped.
    """
    rng = np.random.default_rng(seed)
    base = point.data if isinstance(point, Tensor) else np.asarray(point)
    x = Tensor(np.array(base, dtype=np.float64), requires_grad=True)
    for t in extra:
        if t.dtype != np.float64:
            raise ValueError("gradient_check needs float64 tensors")

    out = f(x)
    proj = rng.standard_normal(out.shape) if out.data.ndim else np.float64(1.0)

    def evaluate() -> np.ndarray:
        val = np.array(f(x).data, dtype=np.float64)
        if not np.all(np.isfinite(val)):
            raise FloatingPointError("non-finite values in gradient check")
        return val

    targets = [x, *extra]
    for t in targets:
        t.requires_grad = True
        t.grad = None
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite values in gradient check")
    backward(tsum(mul(out, Tensor(proj))))

    worst, count, skipped = 0.0, 0, 0
    for t in targets:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_checks is not None and flat.size > max_checks:
            coords = rng.choice(flat.size, size=max_checks, replace=False)
        for i in coords:
            orig = flat[i]
            h = step * max(1.0, abs(orig))
            diffs = []
            for k in (2, 1, -1, -2):
                flat[i] = orig + k * h
                diffs.append(evaluate())
            flat[i] = orig
            # fourth-order central stencil, differenced before projecting so
            # that large outputs do not swamp small changes
            delta = (8 * (diffs[1] - diffs[2]) - (diffs[0] - diffs[3])) / (12 * h)
            num = float(np.sum(delta * proj))
            count += 1
            if skip_kinks:
                d1 = float(np.sum((diffs[1] - diffs[2]) * proj)) / (2 * h)
                d2 = float(np.sum((diffs[0] - diffs[3]) * proj)) / (4 * h)
                if abs(d1 - d2) > 10 * tolerance * max(abs(d1), abs(d2), floor):
                    skipped += 1
                    continue
            a = float(analytic.reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    passed = worst <= tolerance and skipped <= max_kink_fraction * count
    return GradCheckReport(name, worst, tolerance, count, passed, skipped)
