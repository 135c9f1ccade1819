"""The flow-generating diffusion network.

Input frames and the noisy flow state are downsampled 8x by separate
shared-weight encoders, concatenated through a 1x1 projection, and run
through an attention-free 3-level U-Net conditioned on the timestep. Two
heads emit coarse flows and convex-upsampling weight masks; the final
full-resolution prediction is their convex combination. Flows live in the
/128-normalized diffusion value range throughout; callers denormalize.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .flow import MASK_CHANNELS, FlowPair, convex_upsample, denormalize_flow
from .nn import Conv2d, GroupNorm, Linear, Module, ModuleList, norm_groups_for, timestep_embedding
from .rng import Rng
from .tensor import Tensor


@dataclass(frozen=True)
class MotionUNetConfig:
    base_channels: int = 64
    channel_mults: tuple[int, ...] = (1, 2, 4)
    blocks_per_level: int = 2
    time_embed_mult: int = 4
    norm_groups: int = 8
    frame_channels: int = 3
    state_channels: int = 4
    diffusion_steps: int = 1000

    def __post_init__(self):
        if len(self.channel_mults) != 3:
            raise ValueError("the motion U-Net is 3-level; channel_mults needs 3 entries")
        if self.base_channels % 4:
            raise ValueError("base_channels must be divisible by 4")


def upsample_weight_softmax(mask_logits: Tensor) -> Tensor:
    """Softmax each 9-vector of the (N, 576, h, w) mask logits."""
    n, c, h, w = mask_logits.shape
    if c != MASK_CHANNELS:
        raise T.ShapeError(f"mask logits must have {MASK_CHANNELS} channels, got {c}")
    grouped = T.reshape(mask_logits, (n * (MASK_CHANNELS // 9), 9, h, w))
    return T.reshape(T.softmax_channel(grouped), (n, c, h, w))


def _match_extents(x: Tensor, ref: Tensor) -> Tensor:
    """Crop x's spatial extents down to ref's (odd sizes round up on the
    way down, so the upsampled result can overshoot by one)."""
    if x.shape[2] != ref.shape[2]:
        x = T.narrow(x, 2, 0, ref.shape[2])
    if x.shape[3] != ref.shape[3]:
        x = T.narrow(x, 3, 0, ref.shape[3])
    return x


class DownsampleEncoder(Module):
    """Three stride-2 conv/norm/SiLU blocks; 8x spatial reduction."""

    def __init__(self, in_ch: int, out_ch: int, groups: int, rng: Rng):
        widths = (out_ch // 4, out_ch // 2, out_ch)
        self.convs = ModuleList()
        self.norms = ModuleList()
        prev = in_ch
        for w in widths:
            self.convs.append(Conv2d(prev, w, 3, rng, stride=2))
            self.norms.append(GroupNorm(norm_groups_for(w, groups), w))
            prev = w

    def forward(self, x: Tensor) -> Tensor:
        for conv, norm in zip(self.convs, self.norms):
            x = T.silu(norm(conv(x)))
        return x


class ResBlock(Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, groups: int, rng: Rng):
        self.norm1 = GroupNorm(norm_groups_for(in_ch, groups), in_ch)
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng)
        self.emb_proj = Linear(emb_dim, out_ch, rng)
        self.norm2 = GroupNorm(norm_groups_for(out_ch, groups), out_ch)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, gain=0.3)
        self.skip = Conv2d(in_ch, out_ch, 1, rng) if in_ch != out_ch else None

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        bias = self.emb_proj(T.silu(emb))
        h = h + T.reshape(bias, (bias.shape[0], bias.shape[1], 1, 1))
        h = self.conv2(T.silu(self.norm2(h)))
        return h + (self.skip(x) if self.skip is not None else x)


class Downsample(Module):
    def __init__(self, ch: int, rng: Rng):
        self.conv = Conv2d(ch, ch, 3, rng, stride=2)

    def forward(self, x):
        return self.conv(x)


class Upsample(Module):
    def __init__(self, ch: int, rng: Rng):
        self.conv = Conv2d(ch, ch, 3, rng)

    def forward(self, x):
        return self.conv(T.resize(x, 2, "nearest"))


class MotionUNet(Module):
    """Diffusion model over concatenated bi-directional flows."""

    def __init__(self, config: MotionUNetConfig, rng: Rng):
        self.config = config
        cfg = config
        b = cfg.base_channels
        g = cfg.norm_groups
        self.frame_encoder = DownsampleEncoder(cfg.frame_channels, b, g, rng)
        self.state_encoder = DownsampleEncoder(cfg.state_channels, b, g, rng)
        self.proj = Conv2d(3 * b, b, 1, rng)

        emb_dim = b * cfg.time_embed_mult
        self.time_in = Linear(b, emb_dim, rng)
        self.time_out = Linear(emb_dim, emb_dim, rng)

        widths = [b * m for m in cfg.channel_mults]
        self.down_blocks = ModuleList()
        self.downsamples = ModuleList()
        ch = b
        skip_chans: list[list[int]] = []
        for lvl, w in enumerate(widths):
            blocks = ModuleList()
            chans = []
            for _ in range(cfg.blocks_per_level):
                blocks.append(ResBlock(ch, w, emb_dim, g, rng))
                ch = w
                chans.append(ch)
            self.down_blocks.append(blocks)
            skip_chans.append(chans)
            if lvl < len(widths) - 1:
                self.downsamples.append(Downsample(ch, rng))
        self.mid = ResBlock(ch, ch, emb_dim, g, rng)
        self.up_blocks = ModuleList()
        self.upsamples = ModuleList()
        for lvl in reversed(range(len(widths))):
            w = widths[lvl]
            blocks = ModuleList()
            for chans in reversed(skip_chans[lvl]):
                blocks.append(ResBlock(ch + chans, w, emb_dim, g, rng))
                ch = w
            self.up_blocks.append(blocks)
            if lvl > 0:
                self.upsamples.append(Upsample(ch, rng))
        self.out_norm = GroupNorm(norm_groups_for(b, g), b)
        # near-zero head gains: the initial prediction is almost the zero
        # flow field with near-uniform upsampling weights, which matches the
        # static-background prior and keeps early training stable
        self.head_flow = Conv2d(b, cfg.state_channels, 1, rng, gain=0.02)
        self.head_mask = Conv2d(b, MASK_CHANNELS, 1, rng, gain=0.02)

    # -- pieces ------------------------------------------------------------

    def downsample_encode(self, frame0: Tensor, frame1: Tensor, z_t: Tensor):
        """Shared-weight 8x encoding of both frames plus the flow state.

        Frames are expected in [-1, 1]; extents must be divisible by 8.
        """
        for name, x in (("frame0", frame0), ("frame1", frame1), ("state", z_t)):
            if x.shape[2] % 8 or x.shape[3] % 8:
                raise T.ShapeError(f"{name} extents {x.shape[2:]} not divisible by 8")
        return (self.frame_encoder(frame0), self.frame_encoder(frame1),
                self.state_encoder(z_t))

    def project(self, f0: Tensor, f1: Tensor, z: Tensor) -> Tensor:
        if not (f0.shape[2:] == f1.shape[2:] == z.shape[2:]):
            raise T.ShapeError(
                f"projection inputs disagree spatially: {f0.shape} {f1.shape} {z.shape}")
        return self.proj(T.concat([f0, f1, z], axis=1))

    def unet_forward(self, p: Tensor, t) -> tuple[Tensor, Tensor]:
        """(coarse flows, upsample-mask logits) from projected features."""
        t_arr = np.atleast_1d(np.asarray(t))
        if np.any(t_arr < 1) or np.any(t_arr > self.config.diffusion_steps):
            raise ValueError(f"timestep {t} outside [1, {self.config.diffusion_steps}]")
        if t_arr.size == 1:
            t_arr = np.full(p.shape[0], t_arr[0])
        emb = Tensor(timestep_embedding(t_arr, self.config.base_channels))
        emb = self.time_out(T.silu(self.time_in(emb)))

        h = p
        skips = []
        for lvl, blocks in enumerate(self.down_blocks):
            for blk in blocks:
                h = blk(h, emb)
                skips.append(h)
            if lvl < len(self.downsamples):
                h = self.downsamples[lvl](h)
        h = self.mid(h, emb)
        for i, blocks in enumerate(self.up_blocks):
            for blk in blocks:
                h = blk(T.concat([h, skips.pop()], axis=1), emb)
            if i < len(self.upsamples):
                h = _match_extents(self.upsamples[i](h), skips[-1])
        h = T.silu(self.out_norm(h))
        return self.head_flow(h), self.head_mask(h)

    # -- full composition ---------------------------------------------------

    def predict_x0(self, z_t: Tensor, t, frame0: Tensor, frame1: Tensor) -> Tensor:
        """Full-resolution x0 prediction in normalized flow units.

        Frames are RGB in [0, 1]; extents not divisible by 8 are
        reflect-padded and the output is cropped back.
        """
        z_t, frame0, frame1 = T.as_tensor(z_t), T.as_tensor(frame0), T.as_tensor(frame1)
        if not (z_t.shape[2:] == frame0.shape[2:] == frame1.shape[2:]):
            raise T.ShapeError(
                f"extent mismatch: state {z_t.shape} frames {frame0.shape}/{frame1.shape}")
        h, w = z_t.shape[2], z_t.shape[3]
        pad_h = (-h) % 8
        pad_w = (-w) % 8
        if pad_h or pad_w:
            z_t = T.pad_reflect2d(z_t, 0, pad_h, 0, pad_w)
            frame0 = T.pad_reflect2d(frame0, 0, pad_h, 0, pad_w)
            frame1 = T.pad_reflect2d(frame1, 0, pad_h, 0, pad_w)
        f0, f1, z = self.downsample_encode(frame0 * 2.0 - 1.0, frame1 * 2.0 - 1.0, z_t)
        p = self.project(f0, f1, z)
        coarse, mask_logits = self.unet_forward(p, t)
        weights = upsample_weight_softmax(mask_logits)
        full = convex_upsample(coarse, weights)
        if pad_h:
            full = T.narrow(full, 2, 0, h)
        if pad_w:
            full = T.narrow(full, 3, 0, w)
        return full

    def predict_flows(self, frame0: Tensor, frame1: Tensor, z_t: Tensor, t) -> FlowPair:
        """Single-sample convenience wrapper returning pixel-unit flows."""
        with T.no_grad():
            x0 = self.predict_x0(z_t, t, frame0, frame1)
        return FlowPair.from_tensor(denormalize_flow(x0))

