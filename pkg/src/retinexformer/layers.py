"""Convolution, normalization and activation layers on NHWC tensors.

Every layer accepts ``H x W x C`` or batched ``N x H x W x C`` input and
returns the same rank.  Weights use an ``(kh, kw, Cin // groups, Cout)``
layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError
from .tensor import Tensor, custom_op, reshape


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int = 0
    groups: int = 1
    bias: bool = True

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel_size, self.stride, self.groups) < 1:
            raise ConfigError(f"non-positive field in {self}")
        if self.padding < 0:
            raise ConfigError(f"negative padding in {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"channels {self.in_channels}->{self.out_channels} not divisible by groups={self.groups}"
            )
        if self.groups not in (1, self.in_channels):
            raise ConfigError("only dense (groups=1) or depthwise (groups=Cin) convs are supported")

    @property
    def weight_shape(self):
        k = self.kernel_size
        return (k, k, self.in_channels // self.groups, self.out_channels)

    def output_size(self, h, w):
        k, s, p = self.kernel_size, self.stride, self.padding
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"input {h}x{w} too small for kernel {k} with padding {p}")
        return ho, wo


def _as_batched(x: Tensor):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected HxWxC or NxHxWxC input, got shape {x.shape}")
    return x, False


def _unbatch(y: Tensor, squeezed: bool):
    return reshape(y, y.shape[1:]) if squeezed else y


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def _dense_conv(x: Tensor, spec: ConvSpec, weight: Tensor):
    n, h, w, cin = x.shape
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    ho, wo = spec.output_size(h, w)
    cout = spec.out_channels
    wmat = weight.data.reshape(k * k * cin, cout)
    if k == 1 and s == 1 and p == 0:
        cols = x.data.reshape(-1, cin)
    else:
        xp = _pad(x.data, p)
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
        # (n, ho, wo, cin, k, k) -> rows ordered (kh, kw, cin) to match the weight layout
        cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(-1, k * k * cin)
    out = (cols @ wmat).reshape(n, ho, wo, cout)

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ wmat.T
            if k == 1 and s == 1 and p == 0:
                gx = gcols.reshape(x.shape)
            else:
                gcols = gcols.reshape(n, ho, wo, k, k, cin)
                gxp = np.zeros((n, h + 2 * p, w + 2 * p, cin), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += gcols[:, :, :, i, j, :]
                gx = gxp[:, p : p + h, p : p + w, :]
        return gx, gw

    return custom_op("conv2d", out, (x, weight), back)


def _depthwise_conv(x: Tensor, spec: ConvSpec, weight: Tensor):
    n, h, w, c = x.shape
    k, s, p = spec.kernel_size, spec.stride, spec.padding
    ho, wo = spec.output_size(h, w)
    xp = _pad(x.data, p)
    kern = weight.data.reshape(k, k, c)
    out = np.zeros((n, ho, wo, c), dtype=np.result_type(x.data, kern))
    for i in range(k):
        for j in range(k):
            out += xp[:, i : i + s * ho : s, j : j + s * wo : s, :] * kern[i, j]

    def back(g):
        gw = gx = None
        if weight.requires_grad:
            gw = np.empty((k, k, c), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gw[i, j] = np.einsum(
                        "nhwc,nhwc->c", xp[:, i : i + s * ho : s, j : j + s * wo : s, :], g
                    )
            gw = gw.reshape(weight.shape)
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += g * kern[i, j]
            gx = gxp[:, p : p + h, p : p + w, :]
        return gx, gw

    return custom_op("conv2d_depthwise", out, (x, weight), back)


def _add_channel_bias(y: Tensor, bias: Tensor):
    def back(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return custom_op("bias_add", y.data + bias.data, (y, bias), back)


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Zero-padded cross-correlation; ``groups == in_channels`` is depthwise."""
    if weight.shape != spec.weight_shape:
        raise ConfigError(f"conv weight shape {weight.shape} != expected {spec.weight_shape}")
    if spec.bias and bias is None:
        raise ConfigError("ConvSpec declares a bias but none was given")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ConfigError(f"bias shape {bias.shape} != ({spec.out_channels},)")
    xb, squeezed = _as_batched(x)
    if xb.shape[-1] != spec.in_channels:
        raise ConfigError(f"input has {xb.shape[-1]} channels, spec expects {spec.in_channels}")
    if spec.groups == 1:
        y = _dense_conv(xb, spec, weight)
    else:
        if spec.out_channels != spec.in_channels:
            raise ConfigError("depthwise conv needs out_channels == in_channels")
        y = _depthwise_conv(xb, spec, weight)
    if bias is not None:
        y = _add_channel_bias(y, bias)
    return _unbatch(y, squeezed)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Kernel-2, stride-2 transposed convolution (exact spatial doubling).

    ``weight`` has shape ``(2, 2, Cout, Cin)``: the very array a stride-2,
    kernel-2 :func:`conv2d` mapping ``Cout -> Cin`` would use, so this op is
    that conv's adjoint.
    """
    xb, squeezed = _as_batched(x)
    n, h, w, cin = xb.shape
    if weight.ndim != 4 or weight.shape[:2] != (2, 2) or weight.shape[3] != cin:
        raise ShapeError(f"deconv weight {weight.shape} incompatible with {cin} input channels")
    cout = weight.shape[2]
    # (cin, 2*2*cout): column order (i, j, o)
    wmat = weight.data.transpose(3, 0, 1, 2).reshape(cin, 4 * cout)
    xd = xb.data
    blocks = (xd.reshape(-1, cin) @ wmat).reshape(n, h, w, 2, 2, cout)
    out = blocks.transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * w, cout)

    def back(g):
        gb = g.reshape(n, h, 2, w, 2, cout).transpose(0, 1, 3, 2, 4, 5).reshape(-1, 4 * cout)
        gx = (gb @ wmat.T).reshape(xb.shape) if xb.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = (xd.reshape(-1, cin).T @ gb).reshape(cin, 2, 2, cout).transpose(1, 2, 3, 0)
        return gx, gw

    y = custom_op("conv_transpose2d", out, (xb, weight), back)
    if bias is not None:
        y = _add_channel_bias(y, bias)
    return _unbatch(y, squeezed)


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError("layer norm epsilon must be positive")
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ConfigError(f"gamma {self.gamma.shape} / beta {self.beta.shape} must be equal 1-D")


def layer_norm(x: Tensor, params: LayerNormParams) -> Tensor:
    """Normalize each position's channel vector, then apply the affine terms."""
    c = x.shape[-1]
    if params.gamma.shape != (c,):
        raise ShapeError(f"layer norm over {c} channels got gamma of shape {params.gamma.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + params.epsilon)
    xhat = centered * inv_std
    gamma, beta = params.gamma, params.beta
    out = xhat * gamma.data + beta.data

    def back(g):
        flat_g = g.reshape(-1, c)
        ggamma = (flat_g * xhat.reshape(-1, c)).sum(axis=0) if gamma.requires_grad else None
        gbeta = flat_g.sum(axis=0) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv_std * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, ggamma, gbeta

    return custom_op("layer_norm", out, (x, gamma, beta), back)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd * xd * xd)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return custom_op("gelu", out, (x,), back)


@dataclass
class FFNParams:
    expand: Tensor  # (1, 1, C, 4C)
    project: Tensor  # (1, 1, 4C, C)

    @property
    def channels(self):
        return self.expand.shape[2]


FFN_EXPANSION = 4


def ffn(x: Tensor, params: FFNParams) -> Tensor:
    c = x.shape[-1]
    hidden = params.expand.shape[3]
    if params.expand.shape != (1, 1, c, hidden) or params.project.shape != (1, 1, hidden, c):
        raise ConfigError(
            f"FFN weights {params.expand.shape}/{params.project.shape} do not fit {c} channels"
        )
    y = conv2d(x, ConvSpec(c, hidden, 1, bias=False), params.expand)
    y = gelu(y)
    return conv2d(y, ConvSpec(hidden, c, 1, bias=False), params.project)
