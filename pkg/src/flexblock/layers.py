"""BFP-quantized layer math for the forward, backward and weight-update steps.

Tensors are NCHW; dense kernels are ``(C_out, C_in, k, k)`` and depthwise
kernels ``(C, 1, k, k)``.  Convolution is cross-correlation.  Quantized
operands are dequantized exactly (every BFP value is a float64) and
accumulated in float64.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .bfp import BfpTensor, Format, MantissaWidth, block_tensor

__all__ = [
    "LayerKind",
    "ActivationSpec",
    "PoolSpec",
    "LayerSpec",
    "PrecisionConfig",
    "BatchNormState",
    "quantize_input",
    "quantize_weight",
    "conv_forward",
    "conv_backward_input",
    "conv_backward_weight",
    "forward_conv",
    "backward_conv",
    "weight_gradient",
    "weight_update",
    "activation_fwd",
    "activation_bwd",
    "pool_fwd",
    "pool_bwd",
    "range_batch_norm_fwd",
    "range_batch_norm_bwd",
]


class LayerKind(str, enum.Enum):
    CONV1_FC = "conv1x1_or_fc"
    CONV3 = "conv3"
    CONV5 = "conv5"
    CONV7 = "conv7"
    DWCONV3 = "dwconv3"
    DWCONV5 = "dwconv5"
    DWCONV7 = "dwconv7"

    @property
    def kernel(self) -> int:
        return {"conv1x1_or_fc": 1, "conv3": 3, "conv5": 5, "conv7": 7,
                "dwconv3": 3, "dwconv5": 5, "dwconv7": 7}[self.value]

    @property
    def depthwise(self) -> bool:
        return self.value.startswith("dw")

    @classmethod
    def coerce(cls, value) -> "LayerKind":
        if isinstance(value, cls):
            return value
        key = str(value).lower()
        aliases = {"conv1": "conv1x1_or_fc", "fc": "conv1x1_or_fc", "conv1x1": "conv1x1_or_fc",
                   "linear": "conv1x1_or_fc"}
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown layer type {value!r}") from None


@dataclass(frozen=True)
class ActivationSpec:
    kind: str = "relu"
    alpha: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("relu", "relu_alpha"):
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind == "relu_alpha" and not (self.alpha is not None and self.alpha > 0):
            raise ValueError("relu_alpha needs alpha > 0")


@dataclass(frozen=True)
class PoolSpec:
    kind: str = "none"
    window: int = 2
    stride: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("none", "max", "avg"):
            raise ValueError(f"unknown pooling {self.kind!r}")
        if self.window < 1:
            raise ValueError("pool window must be >= 1")
        if self.stride is None:
            object.__setattr__(self, "stride", self.window)
        if self.stride < 1:
            raise ValueError("pool stride must be >= 1")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        if self.kind == "none":
            return h, w
        if self.window > h or self.window > w:
            raise ValueError(f"pool window {self.window} larger than input {h}x{w}")
        return (h - self.window) // self.stride + 1, (w - self.window) // self.stride + 1


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    c_in: int
    c_out: int
    h: int = 1
    w: int = 1
    stride: int = 1
    padding: int = 0
    activation: Optional[ActivationSpec] = None
    pool: PoolSpec = field(default_factory=PoolSpec)
    batch_norm: bool = False
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind.coerce(self.kind))
        if min(self.c_in, self.c_out, self.h, self.w, self.stride) < 1 or self.padding < 0:
            raise ValueError(f"invalid layer dimensions in {self!r}")
        if self.kind.depthwise and self.c_in != self.c_out:
            raise ValueError("depthwise layers need c_in == c_out")
        ho, wo = self.out_hw
        if ho < 1 or wo < 1:
            raise ValueError(f"layer {self.name or self.kind.value} has empty output")

    @property
    def kernel(self) -> int:
        return self.kind.kernel

    @property
    def out_hw(self) -> tuple[int, int]:
        k = self.kernel
        return ((self.h + 2 * self.padding - k) // self.stride + 1,
                (self.w + 2 * self.padding - k) // self.stride + 1)

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        k = self.kernel
        return (self.c_out, 1 if self.kind.depthwise else self.c_in, k, k)

    @property
    def macs_per_sample(self) -> int:
        ho, wo = self.out_hw
        per_out = self.kernel ** 2 * (1 if self.kind.depthwise else self.c_in)
        return per_out * self.c_out * ho * wo


def _width_field(value) -> MantissaWidth:
    return MantissaWidth.coerce(value)


@dataclass(frozen=True)
class PrecisionConfig:
    """Mantissa widths for activations, weights, local and weight gradients."""

    x_width: MantissaWidth = MantissaWidth.W16
    w_width: MantissaWidth = MantissaWidth.W16
    g_width: MantissaWidth = MantissaWidth.W16
    wg_width: MantissaWidth = MantissaWidth.W16

    def __post_init__(self):
        for name in ("x_width", "w_width", "g_width", "wg_width"):
            object.__setattr__(self, name, _width_field(getattr(self, name)))

    @classmethod
    def uniform(cls, width, wg=None) -> "PrecisionConfig":
        return cls(width, width, width, width if wg is None else wg)

    def replace(self, **kw) -> "PrecisionConfig":
        d = {"x_width": self.x_width, "w_width": self.w_width,
             "g_width": self.g_width, "wg_width": self.wg_width}
        d.update(kw)
        return PrecisionConfig(**d)

    def as_dict(self) -> dict:
        return {"x": int(self.x_width), "w": int(self.w_width),
                "g": int(self.g_width), "wg": int(self.wg_width)}


# ---------------------------------------------------------------------------
# quantization points

def quantize_input(x, spec: LayerSpec, width) -> BfpTensor:
    return block_tensor(x, spec.kind, Format.coerce(width), "activation")


def quantize_weight(w, spec: LayerSpec, width) -> BfpTensor:
    return block_tensor(w, spec.kind, Format.coerce(width), "weight")


def _values(t) -> np.ndarray:
    return t.dequantize() if isinstance(t, BfpTensor) else np.asarray(t, dtype=np.float64)


# ---------------------------------------------------------------------------
# float cores (operate on dequantized arrays)

def _windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, C, Ho, Wo, k, k)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


def _check_input(x: np.ndarray, spec: LayerSpec):
    if x.ndim != 4 or x.shape[1:] != (spec.c_in, spec.h, spec.w):
        raise ValueError(f"input shape {x.shape} does not match layer (N, {spec.c_in}, {spec.h}, {spec.w})")


def _check_weight(w: np.ndarray, spec: LayerSpec):
    if w.shape != spec.weight_shape:
        raise ValueError(f"weight shape {w.shape} does not match layer {spec.weight_shape}")


def _check_grad(g: np.ndarray, spec: LayerSpec, n: Optional[int] = None):
    ho, wo = spec.out_hw
    if g.ndim != 4 or g.shape[1:] != (spec.c_out, ho, wo) or (n is not None and g.shape[0] != n):
        raise ValueError(f"gradient shape {g.shape} does not match layer output (N, {spec.c_out}, {ho}, {wo})")


def conv_forward(x: np.ndarray, w: np.ndarray, spec: LayerSpec) -> np.ndarray:
    _check_input(x, spec)
    _check_weight(w, spec)
    k, s = spec.kernel, spec.stride
    ho, wo = spec.out_hw
    cols = _windows(_pad(x, spec.padding), k, s, ho, wo)
    if spec.kind.depthwise:
        return np.einsum("ncpqij,cij->ncpq", cols, w[:, 0], optimize=True)
    return np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)


def conv_backward_input(g: np.ndarray, w: np.ndarray, spec: LayerSpec) -> np.ndarray:
    """Full correlation of ``g`` (zero-dilated by the stride) with flipped, transposed kernels."""
    _check_grad(g, spec)
    _check_weight(w, spec)
    k, s, p = spec.kernel, spec.stride, spec.padding
    n = g.shape[0]
    ho, wo = spec.out_hw
    hp, wp = spec.h + 2 * p, spec.w + 2 * p
    # dilate, then pad by k-1 on the leading side and enough on the trailing
    # side to cover rows the forward stride skipped
    dil = np.zeros((n, g.shape[1], hp + k - 1, wp + k - 1))
    dil[:, :, k - 1 : k - 1 + (ho - 1) * s + 1 : s, k - 1 : k - 1 + (wo - 1) * s + 1 : s] = g
    flipped = w[:, :, ::-1, ::-1]
    cols = _windows(dil, k, 1, hp, wp)
    if spec.kind.depthwise:
        gx = np.einsum("ncpqij,cij->ncpq", cols, flipped[:, 0], optimize=True)
    else:
        # transposed kernels: contract over C_out
        gx = np.tensordot(cols, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
    return gx[:, :, p : p + spec.h, p : p + spec.w]


def conv_backward_weight(x: np.ndarray, g: np.ndarray, spec: LayerSpec) -> np.ndarray:
    """Pairwise correlation of each input channel with each output gradient channel."""
    _check_input(x, spec)
    _check_grad(g, spec, x.shape[0])
    k, s = spec.kernel, spec.stride
    ho, wo = spec.out_hw
    cols = _windows(_pad(x, spec.padding), k, s, ho, wo)
    if spec.kind.depthwise:
        return np.einsum("ncpqij,ncpq->cij", cols, g, optimize=True)[:, None]
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))


# ---------------------------------------------------------------------------
# BFP-operand entry points

def forward_conv(x, w, spec: LayerSpec) -> np.ndarray:
    """Pre-BN, pre-activation output of a layer from (typically BFP) operands."""
    return conv_forward(_values(x), _values(w), spec)


def backward_conv(g_y, w, spec: LayerSpec) -> np.ndarray:
    """Local gradient w.r.t. the layer input."""
    return conv_backward_input(_values(g_y), _values(w), spec)


def weight_gradient(g_y, x, spec: LayerSpec, wg_width=None) -> np.ndarray:
    """Weight gradient; operands are re-blocked at ``wg_width`` when given.

    Re-blocking starts from the dequantized values of BFP inputs, or from the
    raw arrays when float data is passed (the trainer passes float master copies).
    """
    g_arr, x_arr = _values(g_y), _values(x)
    if wg_width is not None:
        g_arr = quantize_input(g_arr, _grad_spec(spec), wg_width).dequantize()
        x_arr = quantize_input(x_arr, spec, wg_width).dequantize()
    return conv_backward_weight(x_arr, g_arr, spec)


def _grad_spec(spec: LayerSpec) -> LayerSpec:
    # G_Y is blocked with the same kernel rule as the layer input
    return spec


def weight_update(w, dw, eta: float) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    dw = np.asarray(dw, dtype=np.float64)
    if w.shape != dw.shape:
        raise ValueError(f"weight {w.shape} and gradient {dw.shape} shapes differ")
    if eta < 0:
        raise ValueError("learning rate must be non-negative")
    return w - eta * dw


# ---------------------------------------------------------------------------
# ReLU / ReLU-alpha

def activation_fwd(x, spec: Optional[ActivationSpec]) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if spec is None:
        return x
    y = np.maximum(x, 0.0)
    if spec.kind == "relu_alpha":
        y = np.minimum(y, spec.alpha)
    return y


def activation_bwd(x, g, spec: Optional[ActivationSpec]) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if spec is None:
        return g
    mask = x > 0
    if spec.kind == "relu_alpha":
        mask &= x < spec.alpha
    return np.where(mask, g, 0.0)


# ---------------------------------------------------------------------------
# pooling

def pool_fwd(x, spec: PoolSpec):
    """Returns ``(y, cache)``; ``cache`` feeds :func:`pool_bwd`."""
    x = np.asarray(x, dtype=np.float64)
    if spec.kind == "none":
        return x, None
    n, c, h, w = x.shape
    ho, wo = spec.output_hw(h, w)
    win = _windows(x, spec.window, spec.stride, ho, wo).reshape(n, c, ho, wo, -1)
    if spec.kind == "max":
        idx = np.argmax(win, axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)
    return win.mean(axis=-1), (x.shape, None)


def pool_bwd(g, cache, spec: PoolSpec) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if spec.kind == "none":
        return g
    shape, idx = cache
    n, c, h, w = shape
    _, _, ho, wo = g.shape
    k, s = spec.window, spec.stride
    gx = np.zeros(shape)
    if spec.kind == "max":
        di, dj = np.divmod(idx, k)
        rows = np.arange(ho)[None, None, :, None] * s + di
        cols = np.arange(wo)[None, None, None, :] * s + dj
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gx, (np.broadcast_to(nn, g.shape), np.broadcast_to(cc, g.shape), rows, cols), g)
        return gx
    share = g / (k * k)
    for i in range(k):
        for j in range(k):
            gx[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += share
    return gx


# ---------------------------------------------------------------------------
# batch normalization

BN_EPS = 1e-5


def range_constant(n: int) -> float:
    """Scale that maps a batch range to a standard-deviation estimate."""
    return 1.0 / math.sqrt(2.0 * math.log(n))


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_scale: np.ndarray
    momentum: float = 0.1
    mode: str = "range"

    @classmethod
    def init(cls, channels: int, mode: str = "range", momentum: float = 0.1) -> "BatchNormState":
        if mode not in ("range", "standard"):
            raise ValueError(f"unknown batch norm mode {mode!r}")
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels),
                   momentum, mode)


def _per_channel(x: np.ndarray) -> np.ndarray:
    # (C, N*H*W) view of a (N, C, ...) tensor
    return np.moveaxis(x, 1, 0).reshape(x.shape[1], -1)


def _bcast(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def range_batch_norm_fwd(x, state: BatchNormState, training: bool = True):
    """Normalize by ``C(n) * (max - min)`` per channel; returns ``(y, cache)``.

    Training mode updates ``state``'s running statistics in place.
    """
    x = np.asarray(x, dtype=np.float64)
    if not training:
        xhat = (x - _bcast(state.running_mean, x.ndim)) / _bcast(state.running_scale + BN_EPS, x.ndim)
        return _bcast(state.gamma, x.ndim) * xhat + _bcast(state.beta, x.ndim), None
    flat = _per_channel(x)
    n = flat.shape[1]
    if n < 2:
        raise ValueError("batch norm in training mode needs at least 2 values per channel")
    mu = flat.mean(axis=1)
    centered = flat - mu[:, None]
    if state.mode == "range":
        i_max = np.argmax(flat, axis=1)
        i_min = np.argmin(flat, axis=1)
        rng = flat[np.arange(flat.shape[0]), i_max] - flat[np.arange(flat.shape[0]), i_min]
        scale = range_constant(n) * rng
        denom = scale + BN_EPS
        extra = (i_max, i_min, range_constant(n))
    else:
        var = (centered ** 2).mean(axis=1)
        scale = np.sqrt(var)
        denom = np.sqrt(var + BN_EPS)
        extra = None
    xhat = centered / denom[:, None]
    m = state.momentum
    state.running_mean = (1 - m) * state.running_mean + m * mu
    state.running_scale = (1 - m) * state.running_scale + m * scale
    y_flat = state.gamma[:, None] * xhat + state.beta[:, None]
    y = np.moveaxis(y_flat.reshape((x.shape[1], x.shape[0]) + x.shape[2:]), 0, 1)
    return y, (x.shape, xhat, denom, extra, state.gamma.copy(), state.mode)


def range_batch_norm_bwd(g, cache):
    """Returns ``(g_x, g_gamma, g_beta)``."""
    shape, xhat, denom, extra, gamma, mode = cache
    gf = _per_channel(np.asarray(g, dtype=np.float64))
    n = gf.shape[1]
    g_beta = gf.sum(axis=1)
    g_gamma = (gf * xhat).sum(axis=1)
    gxhat = gf * gamma[:, None]
    mean_g = gxhat.mean(axis=1, keepdims=True)
    if mode == "range":
        i_max, i_min, c = extra
        gx = (gxhat - mean_g) / denom[:, None]
        # d(denom)/dx is +c at argmax and -c at argmin
        dot = (gxhat * xhat).sum(axis=1) / denom
        rows = np.arange(gf.shape[0])
        gx[rows, i_max] -= c * dot
        gx[rows, i_min] += c * dot
    else:
        proj = (gxhat * xhat).mean(axis=1, keepdims=True)
        gx = (gxhat - mean_g - xhat * proj) / denom[:, None]
    gx = np.moveaxis(gx.reshape((shape[1], shape[0]) + tuple(shape[2:])), 0, 1)
    return gx, g_gamma, g_beta
