"""Spatial, channel and combined (CBAM) attention.

CBAM applies the spatial gate first and the channel gate second.
"""
from __future__ import annotations

import numpy as np

from .module import Module, Parameter, kaiming_uniform
from .tensor import (PadQuad, Tensor, add, channel_reduce, concat_channels, conv2d, mul, pool2d,
                     relu, sigmoid)


class CamParams(Module):
    """Shared two-layer MLP (stored as 1x1 conv weights, no biases)."""

    def __init__(self, channels: int, rng: np.random.Generator, ratio: int = 4, zero: bool = False):
        if channels % ratio:
            raise ValueError(f"channel count {channels} not divisible by reduction ratio {ratio}")
        hidden = channels // ratio
        self.ratio = ratio
        if zero:
            self.mlp_w1 = Parameter(np.zeros((hidden, channels, 1, 1)))
            self.mlp_w2 = Parameter(np.zeros((channels, hidden, 1, 1)))
        else:
            self.mlp_w1 = Parameter(kaiming_uniform(rng, (hidden, channels, 1, 1), channels))
            self.mlp_w2 = Parameter(kaiming_uniform(rng, (channels, hidden, 1, 1), hidden))

    def forward(self, f: Tensor) -> Tensor:
        return channel_attention(f, self)


class SamParams(Module):
    def __init__(self, rng: np.random.Generator, zero: bool = False):
        if zero:
            self.conv7 = Parameter(np.zeros((1, 2, 7, 7)))
        else:
            self.conv7 = Parameter(kaiming_uniform(rng, (1, 2, 7, 7), 2 * 49))
        self.bias = Parameter(np.zeros(1))

    def forward(self, f: Tensor) -> Tensor:
        return spatial_attention(f, self)


def spatial_attention_map(f: Tensor, p: SamParams) -> Tensor:
    stacked = concat_channels([channel_reduce(f, "max"), channel_reduce(f, "avg")])
    return sigmoid(conv2d(stacked, p.conv7, p.bias, pad=PadQuad(3, 3, 3, 3)))


def spatial_attention(f: Tensor, p: SamParams) -> Tensor:
    return mul(f, spatial_attention_map(f, p))


def _mlp(v: Tensor, p: CamParams) -> Tensor:
    return conv2d(relu(conv2d(v, p.mlp_w1)), p.mlp_w2)


def channel_attention_weights(f: Tensor, p: CamParams) -> Tensor:
    n, c, h, w = f.shape
    if c != p.mlp_w1.shape[1]:
        raise ValueError(f"channel attention built for {p.mlp_w1.shape[1]} channels, got {c}")
    pooled_max = pool2d(f, "max", (h, w))
    pooled_avg = pool2d(f, "avg", (h, w))
    return sigmoid(add(_mlp(pooled_max, p), _mlp(pooled_avg, p)))


def channel_attention(f: Tensor, p: CamParams) -> Tensor:
    return mul(f, channel_attention_weights(f, p))


def cbam(f: Tensor, sam: SamParams, cam: CamParams) -> Tensor:
    return channel_attention(spatial_attention(f, sam), cam)


class Cbam(Module):
    """CBAM with optional halves, used by the encoder blocks' ablations."""

    def __init__(self, channels: int, rng: np.random.Generator, ratio: int = 4,
                 use_sam: bool = True, use_cam: bool = True):
        self.sam = SamParams(rng) if use_sam else None
        self.cam = CamParams(channels, rng, ratio) if use_cam else None

    def forward(self, f: Tensor) -> Tensor:
        if self.sam is not None:
            f = spatial_attention(f, self.sam)
        if self.cam is not None:
            f = channel_attention(f, self.cam)
        return f
