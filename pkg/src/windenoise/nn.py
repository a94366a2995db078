"""Layer math for the WIN networks: convolution, batch norm, ReLU, add, MSE.

Tensors are plain ``numpy.ndarray`` objects in NCHW layout, float32.
float64 inputs stay float64 end to end, which is what the finite-difference
gradient checks run on; every other dtype is coerced to float32.
Every op is a function of its inputs; the only state that changes is the
running statistics of a :class:`BnParams` passed to a train-mode
``batchnorm_forward`` (the caller owns that object).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

# Upper bound on the number of float32 entries in one im2col block (~128 MB).
_COLS_BUDGET = 32 * 1024 * 1024


class ShapeError(ValueError):
    """Raised when tensor dimensions do not line up."""


def as_float(x) -> np.ndarray:
    x = np.asarray(x)
    return np.ascontiguousarray(x, dtype=np.float64 if x.dtype == np.float64 else DTYPE)


def check_tensor(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Validate a rank-4 NCHW tensor and return it contiguous (float32 unless float64)."""
    x = as_float(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank-4 NCHW, got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")
    return x


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


@dataclass
class ConvParams:
    weight: np.ndarray  # (K_out, K_in, F, F)
    bias: np.ndarray  # (K_out,)

    def __post_init__(self) -> None:
        self.weight = as_float(self.weight)
        self.bias = as_float(self.bias)
        if self.weight.ndim != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ShapeError(f"conv weight must be (K_out, K_in, F, F), got {self.weight.shape}")
        if self.weight.shape[2] % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {self.weight.shape[2]}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"conv bias must have shape ({self.weight.shape[0]},), got {self.bias.shape}")

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def padding(self) -> int:
        return (self.kernel - 1) // 2


class ConvGrads(NamedTuple):
    grad_input: np.ndarray | None
    grad_weight: np.ndarray
    grad_bias: np.ndarray


def _row_blocks(h: int, w: int, c: int, f: int):
    rows = max(1, min(h, _COLS_BUDGET // max(1, c * f * f * w)))
    for r0 in range(0, h, rows):
        yield r0, min(h, r0 + rows)


def _im2col(xp: np.ndarray, f: int, r0: int, r1: int) -> np.ndarray:
    """Rows = output pixels [r0, r1) of one padded HWC sample, columns = (u, v, c) taps."""
    c = xp.shape[2]
    win = sliding_window_view(xp[r0 : r1 + f - 1], (f, f), axis=(0, 1))
    # win: (rows, w, C, F, F) -> (rows, w, F, F, C)
    return win.transpose(0, 1, 3, 4, 2).reshape(-1, f * f * c)


def _padded_hwc(x: np.ndarray, pad: int) -> np.ndarray:
    return np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def _weight_matrix(weight: np.ndarray) -> np.ndarray:
    # (K, C, F, F) -> (F*F*C, K), matching the (u, v, c) column order of _im2col
    k = weight.shape[0]
    return np.ascontiguousarray(weight.transpose(2, 3, 1, 0).reshape(-1, k))


def conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Same-padded, stride-1 cross-correlation.

    ``out[n,k,i,j] = bias[k] + sum_{c,u,v} w[k,c,u,v] * x_pad[n,c,i+u,j+v]``
    """
    x = check_tensor(x, "conv input")
    n, c, h, w = x.shape
    if c != p.in_channels:
        raise ShapeError(f"conv expects {p.in_channels} input channels, got {c}")
    f = p.kernel
    xp = _padded_hwc(x, p.padding)
    wm = _weight_matrix(p.weight.astype(x.dtype, copy=False))
    out = np.empty((n, h, w, p.out_channels), dtype=x.dtype)
    for i in range(n):
        for r0, r1 in _row_blocks(h, w, c, f):
            out[i, r0:r1] = (_im2col(xp[i], f, r0, r1) @ wm).reshape(r1 - r0, w, -1)
    out += p.bias.astype(x.dtype, copy=False)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(
    grad_out: np.ndarray, x: np.ndarray, p: ConvParams, need_input_grad: bool = True
) -> ConvGrads:
    """Adjoint of :func:`conv2d_forward` with respect to input, weight and bias.

    The input gradient is a same-padded correlation of ``grad_out`` with the
    spatially flipped, channel-transposed kernel.
    """
    x = check_tensor(x, "conv cached input")
    grad_out = check_tensor(grad_out, "conv grad_out")
    n, c, h, w = x.shape
    k = p.out_channels
    if grad_out.shape != (n, k, h, w):
        raise ShapeError(f"conv grad_out shape {grad_out.shape} does not match forward output {(n, k, h, w)}")
    f = p.kernel
    xp = _padded_hwc(x, p.padding)
    g_hwc = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1))
    gw = np.zeros((f * f * c, k), dtype=x.dtype)
    for i in range(n):
        for r0, r1 in _row_blocks(h, w, c, f):
            gw += _im2col(xp[i], f, r0, r1).T @ g_hwc[i, r0:r1].reshape(-1, k)
    gw = np.ascontiguousarray(gw.reshape(f, f, c, k).transpose(3, 2, 0, 1))
    gb = grad_out.sum(axis=(0, 2, 3), dtype=np.float64).astype(x.dtype)

    gx = None
    if need_input_grad:
        flipped = ConvParams(
            p.weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).astype(x.dtype),
            np.zeros(c, dtype=x.dtype),
        )
        gx = conv2d_forward(grad_out, flipped)
    return ConvGrads(gx, gw, gb)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray | None
    running_var: np.ndarray | None
    eps: float = 1e-5
    momentum: float = 0.9

    @classmethod
    def identity(cls, channels: int) -> "BnParams":
        return cls(
            gamma=np.ones(channels, dtype=DTYPE),
            beta=np.zeros(channels, dtype=DTYPE),
            running_mean=np.zeros(channels, dtype=DTYPE),
            running_var=np.ones(channels, dtype=DTYPE),
        )

    def __post_init__(self) -> None:
        if self.eps <= 0:
            raise ValueError(f"BN eps must be positive, got {self.eps}")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"BN momentum must lie in (0, 1), got {self.momentum}")
        self.gamma = as_float(self.gamma)
        self.beta = as_float(self.beta)
        c = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            v = getattr(self, name)
            if v is None:
                continue
            v = as_float(v)
            if v.shape != c:
                raise ShapeError(f"BN {name} has shape {v.shape}, expected {c}")
            setattr(self, name, v)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


class BnCache(NamedTuple):
    x_hat: np.ndarray
    inv_std: np.ndarray  # (C,)


class BnGrads(NamedTuple):
    grad_input: np.ndarray
    grad_gamma: np.ndarray
    grad_beta: np.ndarray


def batchnorm_forward(
    x: np.ndarray, p: BnParams, mode: str = "train"
) -> tuple[np.ndarray, BnCache | None]:
    """Per-channel normalization over (N, H, W).

    In ``"train"`` mode the batch statistics are used and ``p``'s running
    statistics are updated in place as ``m * running + (1 - m) * batch``.
    In ``"infer"`` mode only the running statistics are read.
    """
    x = check_tensor(x, "batchnorm input")
    if x.shape[1] != p.channels:
        raise ShapeError(f"batchnorm expects {p.channels} channels, got {x.shape[1]}")
    dt = x.dtype
    gamma = p.gamma.astype(dt, copy=False)[None, :, None, None]
    beta = p.beta.astype(dt, copy=False)[None, :, None, None]

    if mode == "infer":
        if p.running_mean is None or p.running_var is None:
            raise ValueError("batchnorm infer mode needs initialized running statistics")
        inv_std = 1.0 / np.sqrt(p.running_var.astype(np.float64) + p.eps)
        scale = (p.gamma * inv_std).astype(dt)[None, :, None, None]
        return (x - p.running_mean.astype(dt)[None, :, None, None]) * scale + beta, None
    if mode != "train":
        raise ValueError(f"unknown batchnorm mode {mode!r}")

    mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
    centered = x - mean.astype(dt)[None, :, None, None]
    var = np.mean(np.square(centered, dtype=np.float64), axis=(0, 2, 3))
    inv_std = (1.0 / np.sqrt(var + p.eps)).astype(dt)
    x_hat = centered * inv_std[None, :, None, None]

    m = p.momentum
    rdt = p.gamma.dtype
    if p.running_mean is None or p.running_var is None:
        p.running_mean = mean.astype(rdt)
        p.running_var = var.astype(rdt)
    else:
        p.running_mean = (m * p.running_mean + (1.0 - m) * mean).astype(rdt)
        p.running_var = (m * p.running_var + (1.0 - m) * var).astype(rdt)
    return x_hat * gamma + beta, BnCache(x_hat, inv_std)


def batchnorm_backward(grad_out: np.ndarray, cache: BnCache | None, p: BnParams) -> BnGrads:
    if cache is None:
        raise ValueError("batchnorm_backward needs the cache of a train-mode forward")
    grad_out = check_tensor(grad_out, "batchnorm grad_out")
    _same_shape(grad_out, cache.x_hat, "batchnorm_backward")
    count = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
    dt = grad_out.dtype

    g_beta = grad_out.sum(axis=(0, 2, 3), dtype=np.float64)
    g_gamma = (grad_out * cache.x_hat).sum(axis=(0, 2, 3), dtype=np.float64)
    scale = (p.gamma * cache.inv_std / count).astype(dt)[None, :, None, None]
    gx = scale * (
        count * grad_out
        - g_beta.astype(dt)[None, :, None, None]
        - cache.x_hat * g_gamma.astype(dt)[None, :, None, None]
    )
    return BnGrads(gx.astype(dt), g_gamma.astype(dt), g_beta.astype(dt))


# ---------------------------------------------------------------------------
# Pointwise ops and loss
# ---------------------------------------------------------------------------


def relu_forward(x: np.ndarray) -> np.ndarray:
    x = check_tensor(x, "relu input")
    return np.maximum(x, x.dtype.type(0))


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient at exactly zero is taken as 0
    grad_out = check_tensor(grad_out, "relu grad_out")
    _same_shape(grad_out, x, "relu_backward")
    return np.where(x > 0, grad_out, grad_out.dtype.type(0))


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = check_tensor(a, "add lhs")
    b = check_tensor(b, "add rhs")
    _same_shape(a, b, "add")
    return a + b


def add_backward(grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return grad_out, grad_out


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Return ``sum((pred - target)**2) / (2 * numel)`` and its gradient."""
    pred = check_tensor(pred, "mse pred")
    target = check_tensor(target, "mse target")
    _same_shape(pred, target, "mse_loss")
    diff = pred - target
    numel = diff.size
    loss = float(np.sum(np.square(diff, dtype=np.float64)) / (2.0 * numel))
    return loss, diff / diff.dtype.type(numel)
