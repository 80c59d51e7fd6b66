"""U-Net encoder/decoder built on the autodiff engine.

Each block is two rounds of conv3x3 -> batchnorm -> ReLU -> dropout. The
encoder halves resolution with max pooling after each block, the decoder
doubles it with a learnable stride-2 transposed convolution and concatenates
the matching encoder features before its block. A 3x3 conv and a sigmoid
produce per-pixel foreground probabilities.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .utils import atomic_write_bytes

CHECKPOINT_MAGIC = b"UNET"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class UNetConfig:
    depth: int = 4
    base_channels: int = 32
    dropout_rate: float = 0.1
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5
    in_channels: int = 1
    out_channels: int = 1
    seed: int = 0

    def validate(self) -> "UNetConfig":
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if not 0 < self.bn_momentum < 1:
            raise ValueError("bn_momentum must be in (0, 1)")
        if self.bn_epsilon <= 0:
            raise ValueError("bn_epsilon must be positive")
        return self

    def channel_ladder(self) -> list[int]:
        """Encoder widths per level followed by the bottleneck width."""
        return [self.base_channels * 2**k for k in range(self.depth + 1)]


@dataclass
class UNetModel:
    config: UNetConfig
    params: dict[str, Tensor]
    bn: dict[str, BatchNormState]
    rng: np.random.Generator = field(repr=False, default=None)

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.config.seed)

    def parameters(self) -> list[tuple[str, Tensor]]:
        """Trainable tensors in a fixed order (conv weights/biases, BN gamma/beta)."""
        out = []
        for name, t in self.params.items():
            out.append((name, t))
            bn_name = _bn_for(name)
            if bn_name is not None:
                st = self.bn[bn_name]
                out.append((bn_name + ".gamma", st.gamma))
                out.append((bn_name + ".beta", st.beta))
        return out

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every stored array, including BN running statistics (serialization order)."""
        out = []
        for name, t in self.parameters():
            out.append((name, t.data))
            if name.endswith(".beta"):
                st = self.bn[name[: -len(".beta")]]
                out.append((name[: -len(".beta")] + ".running_mean", st.running_mean))
                out.append((name[: -len(".beta")] + ".running_var", st.running_var))
        return out

    @property
    def parameter_count(self) -> int:
        return int(sum(t.data.size for _, t in self.parameters()))

    def zero_grad(self):
        for _, t in self.parameters():
            t.grad = None

    def astype(self, dtype) -> "UNetModel":
        """Deep copy with every array cast to ``dtype``."""
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        bn = {
            k: BatchNormState(
                gamma=Tensor(s.gamma.data.astype(dtype), requires_grad=True),
                beta=Tensor(s.beta.data.astype(dtype), requires_grad=True),
                running_mean=s.running_mean.astype(dtype),
                running_var=s.running_var.astype(dtype),
                momentum=s.momentum,
                epsilon=s.epsilon,
            )
            for k, s in self.bn.items()
        }
        return UNetModel(self.config, params, bn)

    def copy(self) -> "UNetModel":
        return self.astype(self.params[next(iter(self.params))].dtype)

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        """Overwrite every stored array in place from a name -> array mapping."""
        for name, arr in self.state_arrays():
            arr[...] = arrays[name]


def _bn_for(param_name: str) -> str | None:
    # BN i follows conv i inside a block: "enc1.conv2.b" -> "enc1.bn2"
    parts = param_name.split(".")
    if len(parts) == 3 and parts[1].startswith("conv") and parts[2] == "b":
        return f"{parts[0]}.bn{parts[1][4:]}"
    return None


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def build_model(config: UNetConfig, dtype=np.float32) -> UNetModel:
    config.validate()
    rng = np.random.default_rng(config.seed)
    params: dict[str, Tensor] = {}
    bn: dict[str, BatchNormState] = {}

    def conv(name, c_in, c_out):
        params[f"{name}.w"] = Tensor(_he(rng, (c_out, c_in, 3, 3), 9 * c_in, dtype), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def block(name, c_in, c_out):
        conv(f"{name}.conv1", c_in, c_out)
        bn[f"{name}.bn1"] = BatchNormState.create(c_out, config.bn_momentum, config.bn_epsilon, dtype)
        conv(f"{name}.conv2", c_out, c_out)
        bn[f"{name}.bn2"] = BatchNormState.create(c_out, config.bn_momentum, config.bn_epsilon, dtype)

    ladder = config.channel_ladder()
    c_prev = config.in_channels
    for k in range(config.depth):
        block(f"enc{k + 1}", c_prev, ladder[k])
        c_prev = ladder[k]
    block("bottleneck", c_prev, ladder[config.depth])
    for k in reversed(range(config.depth)):
        c_up_in, c_out = ladder[k + 1], ladder[k]
        # each output pixel of a stride-2 2x2 transposed conv sees one tap per input channel
        params[f"up{k + 1}.w"] = Tensor(_he(rng, (c_up_in, c_out, 2, 2), c_up_in, dtype), requires_grad=True)
        params[f"up{k + 1}.b"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)
        block(f"dec{k + 1}", 2 * c_out, c_out)
    conv("head", ladder[0], config.out_channels)
    return UNetModel(config, params, bn, np.random.default_rng(config.seed))


def _double_block(model: UNetModel, name: str, x: Tensor, mode: str, rng) -> Tensor:
    p = model.params
    rate = model.config.dropout_rate
    for i in (1, 2):
        x = ad.conv2d(x, p[f"{name}.conv{i}.w"], p[f"{name}.conv{i}.b"])
        x = ad.batchnorm(x, model.bn[f"{name}.bn{i}"], mode)
        x = ad.relu(x)
        x = ad.dropout(x, rate, mode, rng)
    return x


def check_input(model: UNetModel, shape) -> None:
    cfg = model.config
    if len(shape) != 4:
        raise ValueError(f"expected (N, C, H, W) input, got shape {shape}")
    n, c, h, w = shape
    if c != cfg.in_channels:
        raise ValueError(f"input has {c} channels, model expects {cfg.in_channels}")
    f = 2**cfg.depth
    if h % f or w % f:
        raise ValueError(f"spatial dims {h}x{w} must be divisible by {f} for depth {cfg.depth}")


def forward(model: UNetModel, x, mode: str = "train", rng: np.random.Generator | None = None) -> Tensor:
    """Per-pixel probabilities, same (H, W) as the input."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=model.params["head.w"].dtype))
    check_input(model, x.shape)
    rng = model.rng if rng is None else rng
    depth = model.config.depth
    skips = []
    for k in range(depth):
        x = _double_block(model, f"enc{k + 1}", x, mode, rng)
        skips.append(x)
        x = ad.maxpool2(x)
    x = _double_block(model, "bottleneck", x, mode, rng)
    for k in reversed(range(depth)):
        x = ad.transposed_conv2(x, model.params[f"up{k + 1}.w"], model.params[f"up{k + 1}.b"])
        x = ad.concat_channels(skips[k], x)
        x = _double_block(model, f"dec{k + 1}", x, mode, rng)
    x = ad.conv2d(x, model.params["head.w"], model.params["head.b"])
    return ad.sigmoid(x)


def predict_proba(model: UNetModel, x, batch_size: int = 16) -> np.ndarray:
    """Eval-mode probabilities as a plain array, computed in chunks."""
    x = np.asarray(x, dtype=model.params["head.w"].dtype)
    check_input(model, x.shape)
    outs = [forward(model, Tensor(x[i : i + batch_size]), "eval").data for i in range(0, len(x), batch_size)]
    return np.concatenate(outs, axis=0)


def predict_mask(model: UNetModel, x, threshold: float = 0.5) -> np.ndarray:
    """Binary (uint8) mask: 1 where the eval-mode probability exceeds ``threshold``."""
    return (predict_proba(model, x) > threshold).astype(np.uint8)


# ---------------------------------------------------------------- checkpoints


def checkpoint_bytes(model: UNetModel) -> bytes:
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode()
    arrays = model.state_arrays()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays:
        enc = name.encode()
        buf.write(struct.pack("<H", len(enc)))
        buf.write(enc)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: UNetModel, path) -> None:
    atomic_write_bytes(path, checkpoint_bytes(model))


def load_checkpoint(path) -> UNetModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    return checkpoint_from_bytes(blob)


def checkpoint_from_bytes(blob: bytes) -> UNetModel:
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = bytes(view[pos : pos + n])
        pos += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a U-Net checkpoint (bad magic)")
    version, cfg_len = struct.unpack("<II", take(8))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        config = UNetConfig(**json.loads(take(cfg_len)))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"corrupt config block: {exc}") from exc
    model = build_model(config)
    expected = dict(model.state_arrays())
    (count,) = struct.unpack("<I", take(4))
    if count != len(expected):
        raise CheckpointError(f"checkpoint has {count} arrays, config implies {len(expected)}")
    loaded = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if name not in expected or tuple(expected[name].shape) != shape:
            raise CheckpointError(f"unexpected array {name} with shape {shape}")
        size = int(np.prod(shape)) if shape else 1
        loaded[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes in checkpoint")
    model.load_arrays(loaded)
    return model
