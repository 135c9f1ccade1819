"""Recurrent coarse-to-fine frame synthesis.

One synthesis module (a small 3-level U-Net, shared parameters) is applied
from the coarsest pyramid level to the finest. At each level both inputs
are backward-warped by their flows; the module sees the upsampled previous
output (or the equal blend of the warped frames at the top level) and emits
an occlusion mask plus an RGB residual.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .flow import backward_warp, resize_flow
from .nn import Conv2d, GroupNorm, Module, ModuleList, norm_groups_for
from .rng import Rng
from .tensor import Tensor

G_INPUT_CHANNELS = 13  # previous frame 3 + two warped frames 6 + two flows 4


@dataclass(frozen=True)
class PyramidConfig:
    """Pyramid depth; training uses a fixed 3, inference derives from size."""

    levels: int = 3

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"pyramid needs at least 1 level, got {self.levels}")


def inference_levels(height: int, width: int) -> int:
    """ceil(log2(R/32)) with R = min(H, W), floored at one level."""
    r = min(height, width)
    return max(1, math.ceil(math.log2(r / 32)))


def max_feasible_levels(height: int, width: int) -> int:
    """Deepest pyramid whose coarsest level keeps at least 8 px per side."""
    r = min(height, width)
    if r < 8:
        return 0
    return int(math.floor(math.log2(r / 8))) + 1


def _match_extents(x: Tensor, ref: Tensor) -> Tensor:
    if x.shape[2] != ref.shape[2]:
        x = T.narrow(x, 2, 0, ref.shape[2])
    if x.shape[3] != ref.shape[3]:
        x = T.narrow(x, 3, 0, ref.shape[3])
    return x


class _ConvBlock(Module):
    def __init__(self, in_ch: int, out_ch: int, groups: int, rng: Rng):
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng)
        self.norm1 = GroupNorm(norm_groups_for(out_ch, groups), out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng)
        self.norm2 = GroupNorm(norm_groups_for(out_ch, groups), out_ch)

    def forward(self, x):
        x = T.silu(self.norm1(self.conv1(x)))
        return T.silu(self.norm2(self.conv2(x)))


class SynthUNet(Module):
    """Occlusion-mask/residual module: 13 input channels, 4 output channels."""

    def __init__(self, rng: Rng, base_channels: int = 32, norm_groups: int = 8):
        b = base_channels
        g = norm_groups
        widths = (b, 2 * b, 4 * b)
        self.enc = ModuleList([_ConvBlock(G_INPUT_CHANNELS, widths[0], g, rng),
                               _ConvBlock(widths[0], widths[1], g, rng),
                               _ConvBlock(widths[1], widths[2], g, rng)])
        self.down = ModuleList([Conv2d(widths[0], widths[0], 3, rng, stride=2),
                                Conv2d(widths[1], widths[1], 3, rng, stride=2)])
        self.dec = ModuleList([_ConvBlock(widths[2] + widths[1], widths[1], g, rng),
                               _ConvBlock(widths[1] + widths[0], widths[0], g, rng)])
        self.up = ModuleList([Conv2d(widths[2], widths[2], 3, rng),
                              Conv2d(widths[1], widths[1], 3, rng)])
        self.head = Conv2d(widths[0], 4, 1, rng, gain=0.1)

    def forward(self, prev_up: Tensor, warped0: Tensor, warped1: Tensor,
                flow0: Tensor, flow1: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (occlusion mask in [0, 1], RGB residual)."""
        parts = (prev_up, warped0, warped1, flow0, flow1)
        shapes = {p.shape[2:] for p in parts}
        if len(shapes) != 1:
            raise T.ShapeError(f"synthesis inputs disagree spatially: "
                               f"{[p.shape for p in parts]}")
        x = T.concat(list(parts), axis=1)
        if x.shape[1] != G_INPUT_CHANNELS:
            raise T.ShapeError(f"synthesis module expects {G_INPUT_CHANNELS} input "
                               f"channels, got {x.shape[1]}")
        e0 = self.enc[0](x)
        e1 = self.enc[1](self.down[0](e0))
        e2 = self.enc[2](self.down[1](e1))
        u1 = _match_extents(self.up[0](T.resize_to(e2, (2 * e2.shape[2], 2 * e2.shape[3]),
                                                   "nearest")), e1)
        d1 = self.dec[0](T.concat([u1, e1], axis=1))
        u0 = _match_extents(self.up[1](T.resize_to(d1, (2 * d1.shape[2], 2 * d1.shape[3]),
                                                   "nearest")), e0)
        d0 = self.dec[1](T.concat([u0, e0], axis=1))
        out = self.head(d0)
        mask = T.sigmoid(T.narrow(out, 1, 0, 1))
        residual = T.narrow(out, 1, 1, 3)
        return mask, residual


def synthesize_level(module: SynthUNet, prev_frame, frame0_l: Tensor, frame1_l: Tensor,
                     flow_pair_l: Tensor) -> Tensor:
    """One pyramid level: warp both frames, blend by the mask, add residual.

    ``prev_frame`` is the coarser level's output (bicubically upsampled here
    to this level's size) or None at the top level, where the 0.5/0.5 blend
    of the warped frames stands in. Flows are in this level's pixel units.
    """
    flow_pair_l = T.as_tensor(flow_pair_l)
    f0 = T.narrow(flow_pair_l, 1, 0, 2)
    f1 = T.narrow(flow_pair_l, 1, 2, 2)
    w0 = backward_warp(frame0_l, f0)
    w1 = backward_warp(frame1_l, f1)
    if prev_frame is None:
        prev_up = w0 * 0.5 + w1 * 0.5
    else:
        prev_up = T.resize_to(prev_frame, (frame0_l.shape[2], frame0_l.shape[3]), "bicubic")
    mask, residual = module(prev_up, w0, w1, f0, f1)
    return w0 * mask + w1 * (1.0 - mask) + residual


def pyramid_synthesize(module: SynthUNet, frame0: Tensor, frame1: Tensor,
                       flow_pair: Tensor, levels: int = 3, clamp: bool = True) -> Tensor:
    """Coarse-to-fine synthesis with shared module parameters at every level.

    ``flow_pair`` is (N, 4, H, W) in full-resolution pixel units. Each level
    l uses the frames and flows downsampled by 2^l (bilinear frames,
    resize_flow for displacements). The result is clamped to [0, 1] unless
    ``clamp`` is disabled (finite-difference checks want the raw output).
    """
    frame0, frame1, flow_pair = map(T.as_tensor, (frame0, frame1, flow_pair))
    n, c, h, w = frame0.shape
    if frame1.shape != frame0.shape or flow_pair.shape != (n, 4, h, w):
        raise T.ShapeError(f"pyramid inputs disagree: frames {frame0.shape}/{frame1.shape}, "
                           f"flows {flow_pair.shape}")
    feasible = max_feasible_levels(h, w)
    if levels > feasible:
        raise T.ShapeError(f"{h}x{w} supports at most {feasible} pyramid levels, "
                           f"requested {levels}")
    div = 4 * (1 << (levels - 1))
    if h % div or w % div:
        raise T.ShapeError(f"extents {h}x{w} must be divisible by {div} for "
                           f"{levels} levels (pad inputs first)")
    out = None
    for lvl in reversed(range(levels)):
        scale = 1.0 / (1 << lvl)
        if lvl == 0:
            f0_l, f1_l, flows_l = frame0, frame1, flow_pair
        else:
            f0_l = T.resize(frame0, scale, "bilinear")
            f1_l = T.resize(frame1, scale, "bilinear")
            flows_l = resize_flow(flow_pair, scale)
        out = synthesize_level(module, out, f0_l, f1_l, flows_l)
    return T.clamp(out, 0.0, 1.0) if clamp else out
