"""Deterministic encoder-decoder backbone for residual super-resolution.

Four levels: the encoder halves the spatial resolution four times with two
pre-activation residual blocks per level, the decoder mirrors it with
nearest-neighbour upsampling + 3x3 convolution and three residual blocks per
level, concatenating encoder activations at matching scales.  Channels follow
(b, 2b, 4b, 4b); the full-scale width is b=64, i.e. (64, 128, 256, 256).

The backbone maps the nearest-neighbour-upsampled coarse field (normalized)
to a feature map; a fusion head (see :mod:`probunet.model`) turns features
into a residual that is added to the upsampled input expressed in raw
pre-constraint space, so a zero residual reproduces the interpolated field
exactly after the constraint layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

LEVELS = 4
ENC_BLOCKS_PER_LEVEL = 2
DEC_BLOCKS_PER_LEVEL = 3


class ConfigurationError(ValueError):
    pass


@dataclass
class BackboneConfig:
    in_channels: int = 3
    base_channels: int = 64  # full width; the schedule is (b, 2b, 4b, 4b)
    norm: str = "group"      # "group" or "none"
    nonlinearity: str = "silu"

    def __post_init__(self):
        if self.base_channels < 1:
            raise ConfigurationError("base_channels must be >= 1")
        if self.norm not in ("group", "none"):
            raise ConfigurationError(f"unknown norm {self.norm!r}")
        if self.nonlinearity not in ("silu", "relu"):
            raise ConfigurationError(f"unknown nonlinearity {self.nonlinearity!r}")

    @property
    def channel_schedule(self) -> tuple[int, ...]:
        b = self.base_channels
        return (b, 2 * b, 4 * b, 4 * b)

    @property
    def out_feature_channels(self) -> int:
        return self.base_channels


def _make_norm(kind: str, channels: int) -> nn.Module:
    if kind == "none":
        return nn.Identity()
    return nn.GroupNorm(max(1, channels // 16), channels)


def _make_act(kind: str) -> nn.Module:
    return nn.SiLU() if kind == "silu" else nn.ReLU()


class ResidualBlock(nn.Module):
    """norm -> act -> 3x3 conv, twice, plus an additive skip.

    The skip is the identity when channel counts match, otherwise a 1x1
    convolution.
    """

    def __init__(self, in_ch: int, out_ch: int, norm: str = "group", act: str = "silu"):
        super().__init__()
        self.norm1 = _make_norm(norm, in_ch)
        self.act1 = _make_act(act)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = _make_norm(norm, out_ch)
        self.act2 = _make_act(act)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Identity() if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x):
        h = self.conv1(self.act1(self.norm1(x)))
        h = self.conv2(self.act2(self.norm2(h)))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    """Nearest-neighbour x2 followed by a 3x3 convolution."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class UNetBackbone(nn.Module):
    """Encoder-decoder over [B, C, H, W] with H, W divisible by 2**4."""

    def __init__(self, config: BackboneConfig | None = None):
        super().__init__()
        cfg = config or BackboneConfig()
        self.config = cfg
        ch = cfg.channel_schedule
        norm, act = cfg.norm, cfg.nonlinearity

        self.stem = nn.Conv2d(cfg.in_channels, ch[0], 3, padding=1)
        self.enc_levels = nn.ModuleList()
        self.downs = nn.ModuleList()
        for lv in range(LEVELS):
            blocks = nn.ModuleList(
                ResidualBlock(ch[lv], ch[lv], norm, act) for _ in range(ENC_BLOCKS_PER_LEVEL)
            )
            self.enc_levels.append(blocks)
            self.downs.append(Downsample(ch[lv], ch[min(lv + 1, LEVELS - 1)]))

        self.ups = nn.ModuleList()
        self.dec_levels = nn.ModuleList()
        prev = ch[LEVELS - 1]
        for lv in reversed(range(LEVELS)):
            self.ups.append(Upsample(prev, ch[lv]))
            blocks = [ResidualBlock(2 * ch[lv], ch[lv], norm, act)]
            blocks += [ResidualBlock(ch[lv], ch[lv], norm, act)
                       for _ in range(DEC_BLOCKS_PER_LEVEL - 1)]
            self.dec_levels.append(nn.ModuleList(blocks))
            prev = ch[lv]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Map the (normalized, upsampled) input batch to [B, F, H, W] features."""
        if x.ndim != 4:
            raise ConfigurationError(f"expected [B,C,H,W], got shape {tuple(x.shape)}")
        H, W = x.shape[-2:]
        if H % (2 ** LEVELS) or W % (2 ** LEVELS):
            raise ConfigurationError(f"spatial size {H}x{W} not divisible by {2 ** LEVELS}")

        h = self.stem(x)
        skips = []
        for blocks, down in zip(self.enc_levels, self.downs):
            for blk in blocks:
                h = blk(h)
            skips.append(h)
            h = down(h)

        for up, blocks, skip in zip(self.ups, self.dec_levels, reversed(skips)):
            h = up(h)
            h = torch.cat((h, skip), dim=1)
            for blk in blocks:
                h = blk(h)
        return h


def predict_residual(x_up: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
    """Prediction in normalized space: upsampled input plus the learned residual."""
    if x_up.shape != residual.shape:
        raise ValueError(f"shape mismatch {tuple(x_up.shape)} vs {tuple(residual.shape)}")
    return x_up + residual
