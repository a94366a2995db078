"""WIN5, WIN5-R and WIN5-RB: five wide same-padded conv layers.

Layer wiring per variant::

    WIN5     conv-relu x (L-1), conv                      -> x_hat
    WIN5_R   conv-relu x (L-1), conv,      + input skip   -> y + R(y)
    WIN5_RB  conv-bn-relu x (L-1), conv-bn, + input skip  -> y + R(y)
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import nn
from .nn import DTYPE, BnParams, ConvParams


class Variant(str, enum.Enum):
    WIN5 = "WIN5"
    WIN5_R = "WIN5_R"
    WIN5_RB = "WIN5_RB"

    @property
    def has_skip(self) -> bool:
        return self is not Variant.WIN5

    @property
    def has_bn(self) -> bool:
        return self is Variant.WIN5_RB


class ConfigError(ValueError):
    """Invalid model or training configuration."""


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant = Variant.WIN5_RB
    layers: int = 5
    width: int = 128
    kernel: int = 7
    input_channels: int = 1

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "variant", Variant(self.variant))
        except ValueError:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {[v.value for v in Variant]}") from None
        for name in ("layers", "width", "kernel", "input_channels"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
                raise ConfigError(f"{name} must be an integer, got {value!r}")
        if self.layers < 2:
            raise ConfigError(f"need at least 2 layers, got {self.layers}")
        if self.width < 1:
            raise ConfigError(f"width must be >= 1, got {self.width}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel size must be a positive odd integer, got {self.kernel}")
        if self.input_channels != 1:
            raise ConfigError("only single-channel (grayscale) models are supported")

    def channel_plan(self) -> list[tuple[int, int]]:
        """(in, out) channel counts for each layer."""
        k, c = self.width, self.input_channels
        return [(c, k)] + [(k, k)] * (self.layers - 2) + [(k, c)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "variant": self.variant.value,
            "layers": int(self.layers),
            "width": int(self.width),
            "kernel": int(self.kernel),
            "input_channels": int(self.input_channels),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        unknown = set(d) - {"variant", "layers", "width", "kernel", "input_channels"}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def receptive_field(cfg: ModelConfig | None = None, *, layers: int | None = None, kernel: int | None = None) -> int:
    """Side length of the input window that influences one output pixel."""
    if cfg is not None:
        layers, kernel = cfg.layers, cfg.kernel
    if layers is None or kernel is None:
        raise TypeError("receptive_field needs a config or both layers and kernel")
    return 1 + layers * (kernel - 1)


@dataclass
class Layer:
    conv: ConvParams
    bn: BnParams | None
    relu: bool


@dataclass
class Model:
    config: ModelConfig
    layers: list[Layer]
    mode: str = "infer"

    def named_parameters(self) -> dict[str, np.ndarray]:
        """Learnable arrays, in checkpoint order."""
        out: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers, start=1):
            out[f"layer{i}.weight"] = layer.conv.weight
            out[f"layer{i}.bias"] = layer.conv.bias
            if layer.bn is not None:
                out[f"layer{i}.gamma"] = layer.bn.gamma
                out[f"layer{i}.beta"] = layer.bn.beta
        return out

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Every stored array (parameters plus BN running statistics) in checkpoint order."""
        out: dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.layers, start=1):
            out[f"layer{i}.weight"] = layer.conv.weight
            out[f"layer{i}.bias"] = layer.conv.bias
            if layer.bn is not None:
                out[f"layer{i}.gamma"] = layer.bn.gamma
                out[f"layer{i}.beta"] = layer.bn.beta
                out[f"layer{i}.running_mean"] = layer.bn.running_mean
                out[f"layer{i}.running_var"] = layer.bn.running_var
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.named_arrays()
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise nn.ShapeError(f"array set mismatch (missing {missing}, unexpected {extra})")
        for name, ref in expected.items():
            if arrays[name].shape != ref.shape:
                raise nn.ShapeError(f"{name}: expected shape {ref.shape}, got {arrays[name].shape}")
        for i, layer in enumerate(self.layers, start=1):
            layer.conv.weight = np.array(arrays[f"layer{i}.weight"], dtype=DTYPE)
            layer.conv.bias = np.array(arrays[f"layer{i}.bias"], dtype=DTYPE)
            if layer.bn is not None:
                for attr in ("gamma", "beta", "running_mean", "running_var"):
                    setattr(layer.bn, attr, np.array(arrays[f"layer{i}.{attr}"], dtype=DTYPE))

    def parameter_count(self) -> int:
        return sum(a.size for a in self.named_parameters().values())

    def zero_body(self) -> None:
        """Set every conv weight and bias to zero (skip variants become the identity)."""
        for layer in self.layers:
            layer.conv.weight[...] = 0
            layer.conv.bias[...] = 0


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Fresh model with He-normal conv weights, zero biases and identity BN."""
    rng = np.random.default_rng(seed)
    f = cfg.kernel
    layers = []
    plan = cfg.channel_plan()
    for idx, (c_in, c_out) in enumerate(plan):
        std = np.sqrt(2.0 / (f * f * c_in))
        weight = (rng.standard_normal((c_out, c_in, f, f)) * std).astype(DTYPE)
        conv = ConvParams(weight, np.zeros(c_out, dtype=DTYPE))
        bn = BnParams.identity(c_out) if cfg.variant.has_bn else None
        layers.append(Layer(conv, bn, relu=idx < len(plan) - 1))
    return Model(cfg, layers)


@dataclass
class ForwardCache:
    input: np.ndarray
    # per layer: (conv input, bn cache, pre-relu activation)
    steps: list[tuple[np.ndarray, nn.BnCache | None, np.ndarray | None]] = field(default_factory=list)


def forward(m: Model, y: np.ndarray, mode: str | None = None) -> tuple[np.ndarray, ForwardCache | None]:
    """Run the network on ``y`` (N, 1, H, W).

    Returns the recovered image and, in train mode, the cache needed by
    :func:`backward`. Infer mode leaves the model untouched.
    """
    mode = mode or m.mode
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    y = nn.check_tensor(y, "model input")
    if y.shape[1] != m.config.input_channels:
        raise nn.ShapeError(f"model expects {m.config.input_channels} input channel(s), got {y.shape[1]}")

    train = mode == "train"
    cache = ForwardCache(y) if train else None
    h = y
    for layer in m.layers:
        conv_in = h
        h = nn.conv2d_forward(h, layer.conv)
        bn_cache = None
        if layer.bn is not None:
            h, bn_cache = nn.batchnorm_forward(h, layer.bn, mode)
        pre_relu = None
        if layer.relu:
            pre_relu = h
            h = nn.relu_forward(h)
        if train:
            cache.steps.append((conv_in, bn_cache, pre_relu))
    if m.config.variant.has_skip:
        h = nn.add(y, h)
    return h, cache


def backward(m: Model, grad_out: np.ndarray, cache: ForwardCache | None) -> dict[str, np.ndarray]:
    """Gradients of the loss w.r.t. every learnable array, keyed like ``named_parameters``."""
    if cache is None:
        raise ValueError("backward needs the cache from a train-mode forward")
    grads: dict[str, np.ndarray] = {}
    g = grad_out
    if m.config.variant.has_skip:
        _, g = nn.add_backward(g)
    for idx in range(len(m.layers) - 1, -1, -1):
        layer = m.layers[idx]
        conv_in, bn_cache, pre_relu = cache.steps[idx]
        name = f"layer{idx + 1}"
        if layer.relu:
            g = nn.relu_backward(g, pre_relu)
        if layer.bn is not None:
            bg = nn.batchnorm_backward(g, bn_cache, layer.bn)
            g = bg.grad_input
            grads[f"{name}.gamma"] = bg.grad_gamma
            grads[f"{name}.beta"] = bg.grad_beta
        cg = nn.conv2d_backward(g, conv_in, layer.conv, need_input_grad=idx > 0)
        grads[f"{name}.weight"] = cg.grad_weight
        grads[f"{name}.bias"] = cg.grad_bias
        g = cg.grad_input
    order = m.named_parameters()
    return {k: grads[k] for k in order}


def denoise(m: Model, image: np.ndarray) -> np.ndarray:
    """Infer-mode forward on one (H, W) image; the result is not clipped."""
    out, _ = forward(m, np.asarray(image, dtype=DTYPE)[None, None], "infer")
    return out[0, 0]
