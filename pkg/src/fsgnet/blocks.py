"""Encoder, skip and bottleneck blocks: pinwheel convolution, MIAM, MFM, GPM
and the semantic guidance links into the decoder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import CamParams, Cbam, channel_attention
from .module import BatchNorm2d, Conv2d, DepthwiseConv2d, Module
from .tensor import (ComplexPair, PadQuad, Tensor, add, concat_channels, fft2d, hermitian_part,
                     ifft2d, pool2d, relu, split_channels, upsample2d)

# (kernel, padding) per pinwheel branch; every branch preserves h x w
PCONV_BRANCHES = (
    ((1, 3), PadQuad(2, 0, 0, 0)),  # left
    ((1, 3), PadQuad(0, 2, 0, 0)),  # right
    ((3, 1), PadQuad(0, 0, 2, 0)),  # up
    ((3, 1), PadQuad(0, 0, 0, 2)),  # down
)
PCONV_FUSE_PAD = PadQuad(0, 1, 0, 1)


@dataclass(frozen=True)
class MiamFlags:
    use_pconv: bool = True
    use_residual: bool = True
    use_cam: bool = True
    use_sam: bool = True


@dataclass(frozen=True)
class MfmFlags:
    use_d3: bool = True
    use_d5: bool = True
    use_cam: bool = True
    use_fft: bool = True


class PConvParams(Module):
    def __init__(self, in_c: int, out_c: int, rng: np.random.Generator):
        self.branches = [Conv2d(in_c, in_c, k, rng, pad=p, bias=False) for k, p in PCONV_BRANCHES]
        self.fuse = Conv2d(4 * in_c, out_c, 2, rng, pad=PCONV_FUSE_PAD, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return pconv_forward(x, self)


def pconv_forward(x: Tensor, p: PConvParams) -> Tensor:
    in_c = p.branches[0].weight.shape[1]
    if x.shape[1] != in_c:
        raise ValueError(f"pinwheel conv expects {in_c} channels, got {x.shape[1]}")
    return p.fuse(concat_channels([b(x) for b in p.branches]))


class MiamBlock(Module):
    """Residual block of two (pinwheel conv, BN) stages followed by CBAM.

    With ``use_pconv`` off the stages are plain 3x3 convolutions, which with
    attention off gives the baseline U-Net residual block.
    """

    def __init__(self, in_c: int, out_c: int, rng: np.random.Generator, flags: MiamFlags = MiamFlags(),
                 cam_ratio: int = 4, bn_momentum: float = 0.1):
        self.flags = flags
        if flags.use_pconv:
            self.conv1 = PConvParams(in_c, out_c, rng)
            self.conv2 = PConvParams(out_c, out_c, rng)
        else:
            self.conv1 = Conv2d(in_c, out_c, 3, rng, bias=False)
            self.conv2 = Conv2d(out_c, out_c, 3, rng, bias=False)
        self.bn1 = BatchNorm2d(out_c, bn_momentum)
        self.bn2 = BatchNorm2d(out_c, bn_momentum)
        self.attn = Cbam(out_c, rng, cam_ratio, use_sam=flags.use_sam, use_cam=flags.use_cam)
        # projection shortcut (1x1 conv + BN) when the channel count changes
        project = flags.use_residual and in_c != out_c
        self.shortcut = Conv2d(in_c, out_c, 1, rng, bias=False) if project else None
        self.shortcut_bn = BatchNorm2d(out_c, bn_momentum) if project else None

    def forward(self, x: Tensor) -> Tensor:
        return miam_forward(x, self)


def miam_forward(x: Tensor, b: MiamBlock) -> Tensor:
    y = relu(b.bn1(b.conv1(x)))
    y = b.attn(b.bn2(b.conv2(y)))
    if b.flags.use_residual:
        y = add(y, b.shortcut_bn(b.shortcut(x)) if b.shortcut is not None else x)
    return relu(y)


class MfmBlock(Module):
    """Skip-connection filter: multi-scale depthwise features modulated in
    the frequency domain, fused back with a residual half and re-weighted
    by channel attention.

    The frequency-path conv and BN exist even with ``use_fft`` off so that
    ablated and full blocks share a parameter layout for that path.
    """

    def __init__(self, channels: int, rng: np.random.Generator, flags: MfmFlags = MfmFlags(),
                 cam_ratio: int = 4, bn_momentum: float = 0.1):
        if not (flags.use_d3 or flags.use_d5):
            raise ValueError("MFM needs at least one depthwise branch")
        c = channels
        self.flags = flags
        self.channels = c
        self.expand = Conv2d(c, 2 * c, 1, rng)
        self.dconv3 = DepthwiseConv2d(c, 3, rng) if flags.use_d3 else None
        self.dconv5 = DepthwiseConv2d(c, 5, rng) if flags.use_d5 else None
        c5 = c * (int(flags.use_d3) + int(flags.use_d5))
        self.spatial_channels = c5
        self.freq_conv = Conv2d(2 * c5, 2 * c5, 1, rng, bias=False)
        self.freq_bn = BatchNorm2d(2 * c5, bn_momentum)
        self.reduce = Conv2d(c5, c, 1, rng)
        self.cam = CamParams(c, rng, cam_ratio) if flags.use_cam else None

    def forward(self, x: Tensor) -> Tensor:
        return mfm_forward(x, self)


def frequency_modulate(x5: Tensor, b: MfmBlock) -> Tensor:
    """FFT -> 1x1 conv over stacked real/imag -> BN -> ReLU -> inverse FFT.

    The modulated spectrum is projected onto its Hermitian part before the
    inverse transform so the spatial result is exactly real.
    """
    c5 = b.spatial_channels
    spec = fft2d(x5)
    z = relu(b.freq_bn(b.freq_conv(concat_channels([spec.real, spec.imag]))))
    re, im = split_channels(z, [c5, c5])
    return ifft2d(hermitian_part(ComplexPair(re, im)))


def mfm_forward(x: Tensor, b: MfmBlock) -> Tensor:
    c = b.channels
    if x.shape[1] != c:
        raise ValueError(f"MFM built for {c} channels, got {x.shape[1]}")
    x1, x2 = split_channels(b.expand(x), [c, c])
    local = [conv(x1) for conv in (b.dconv3, b.dconv5) if conv is not None]
    x5 = concat_channels(local) if len(local) > 1 else local[0]
    xf = frequency_modulate(x5, b) if b.flags.use_fft else x5
    y = add(b.reduce(xf), x2)
    if b.cam is not None:
        y = channel_attention(y, b.cam)
    return y


GPM_RATES = (2, 4, 8)


class GpmBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator, cam_ratio: int = 4,
                 bn_momentum: float = 0.1):
        c = channels
        self.convs = [Conv2d(c, c, 3, rng) for _ in GPM_RATES]
        self.cams = [CamParams(c, rng, cam_ratio) for _ in GPM_RATES]
        self.fuse = Conv2d(4 * c, c, 3, rng, bias=False)
        # keeps the fused map (aux head input, decoder guidance) at unit scale
        self.fuse_bn = BatchNorm2d(c, bn_momentum)
        self.aux_head = Conv2d(c, 1, 1, rng)

    def forward(self, x: Tensor):
        return gpm_forward(x, self)


def _avg_down(t: Tensor, size: int) -> Tensor:
    f = t.shape[2] // size
    return t if f == 1 else pool2d(t, "avg", f)


def _up_to(t: Tensor, size: int) -> Tensor:
    f = size // t.shape[2]
    return t if f == 1 else upsample2d(t, f, "bilinear")


def gpm_branch_sizes(h: int) -> list[int]:
    """Branch resolutions; pooling rates are capped at the input extent."""
    return [h // min(rate, h) for rate in GPM_RATES]


def gpm_forward(x: Tensor, b: GpmBlock, taps: dict | None = None):
    """Hierarchical pooled context -> (fused feature, 1-channel aux map)."""
    n, c, h, w = x.shape
    if h != w or h & (h - 1):
        raise ValueError(f"GPM needs a square power-of-two input, got {h}x{w}")
    branches = []
    prev = None
    for size, conv, cam in zip(gpm_branch_sizes(h), b.convs, b.cams):
        inp = _avg_down(x, size)
        if prev is not None:
            # finer branch is pooled down to this branch's scale and added
            inp = add(inp, _avg_down(prev, size))
        prev = channel_attention(conv(inp), cam)
        branches.append(prev)
    fused = b.fuse_bn(b.fuse(concat_channels([x] + [_up_to(t, h) for t in branches])))
    if taps is not None:
        for i, t in enumerate(branches):
            taps[f"gpm.branch{i + 2}"] = t
    return fused, b.aux_head(fused)


class GsgfLink(Module):
    def __init__(self, gpm_c: int, stage_c: int, factor: int, rng: np.random.Generator,
                 bn_momentum: float = 0.1):
        self.factor = factor
        self.project = Conv2d(gpm_c, stage_c, 1, rng, bias=False)
        # the GPM output is unnormalized; without BN the guide outgrows the decoder features
        self.bn = BatchNorm2d(stage_c, bn_momentum)

    def forward(self, decoder_feat: Tensor, gpm_fused: Tensor) -> Tensor:
        return gsgf_apply(decoder_feat, gpm_fused, self)


def gsgf_apply(decoder_feat: Tensor, gpm_fused: Tensor, link: GsgfLink) -> Tensor:
    # 1x1 projection commutes with bilinear upsampling (weights sum to one), so
    # projecting first is cheaper; BN statistics come from the low-resolution map
    guide = upsample2d(link.bn(link.project(gpm_fused)), link.factor, "bilinear")
    if guide.shape != decoder_feat.shape:
        raise ValueError(f"guidance flow produced {guide.shape}, decoder stage is {decoder_feat.shape}")
    return add(decoder_feat, guide)
