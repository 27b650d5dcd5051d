"""Probabilistic wrapper around the U-Net backbone.

A prior network maps the upsampled coarse input to an axis-aligned Gaussian
over a 16-dim latent space; a posterior network does the same from the input
concatenated with the high-resolution target.  A latent draw is broadcast to
a feature map, concatenated to the final backbone activations, and passed
through three 1x1 convolutions to produce a residual on top of the
interpolated field expressed in raw pre-constraint space.  Training penalizes
KL(posterior || prior) with a linearly warmed-up weight; inference samples
the prior to generate ensembles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .backbone import BackboneConfig, UNetBackbone, _make_act, _make_norm, predict_residual
from .constraints import ConstraintConfig, apply_constraints, raw_baseline
from .fields import NormStats

LOG_STD_CLAMP = 10.0


@dataclass
class LatentGaussian:
    """Diagonal Gaussian over the latent space: mean and log-std, each [B, L]."""

    mean: torch.Tensor
    log_std: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_std.shape:
            raise ValueError("mean and log_std must have the same shape")

    def sample(self, generator: torch.Generator | None = None) -> torch.Tensor:
        """Reparameterized draw: mean + exp(log_std) * eps, eps ~ N(0, I)."""
        eps = torch.randn(self.mean.shape, generator=generator,
                          dtype=self.mean.dtype, device=self.mean.device)
        return self.mean + torch.exp(self.log_std) * eps


@dataclass
class ProbUNetConfig:
    latent_dim: int = 16
    gamma_max: float = 1e-2
    warmup_steps: int = 200
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    constraint: ConstraintConfig = field(default_factory=ConstraintConfig)

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.gamma_max < 0:
            raise ValueError("gamma_max must be >= 0")


def kl_divergence(q: LatentGaussian, p: LatentGaussian) -> torch.Tensor:
    """Closed-form KL(q || p) for diagonal Gaussians, summed over latent dims.

    Returns one value per batch element; exactly zero when q == p.
    """
    if q.mean.shape != p.mean.shape:
        raise ValueError("latent shapes do not match")
    var_q = torch.exp(2.0 * q.log_std)
    var_p = torch.exp(2.0 * p.log_std)
    term = p.log_std - q.log_std + (var_q + (q.mean - p.mean) ** 2) / (2.0 * var_p) - 0.5
    return term.sum(dim=-1)


def kl_weight(step: int, gamma_max: float, warmup_steps: int) -> float:
    """Linear warm-up: gamma_max * min(1, step / warmup_steps)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return gamma_max * min(1.0, step / warmup_steps)


class LatentEncoder(nn.Module):
    """Four strided-conv stages, global average pool, linear mean/log-std heads.

    Heads are zero-initialized so an untrained network emits the standard
    normal N(0, I).
    """

    def __init__(self, in_channels: int, latent_dim: int, base_channels: int = 64,
                 norm: str = "group", act: str = "silu"):
        super().__init__()
        chans = (max(1, base_channels // 2), base_channels, 2 * base_channels, 4 * base_channels)
        stages = []
        prev = in_channels
        for c in chans:
            stages += [nn.Conv2d(prev, c, 3, stride=2, padding=1), _make_norm(norm, c), _make_act(act)]
            prev = c
        self.stages = nn.Sequential(*stages)
        self.mean_head = nn.Linear(prev, latent_dim)
        self.log_std_head = nn.Linear(prev, latent_dim)
        nn.init.zeros_(self.mean_head.weight)
        nn.init.zeros_(self.mean_head.bias)
        nn.init.zeros_(self.log_std_head.weight)
        nn.init.zeros_(self.log_std_head.bias)

    def forward(self, x: torch.Tensor) -> LatentGaussian:
        h = self.stages(x).mean(dim=(2, 3))
        mean = self.mean_head(h)
        log_std = torch.clamp(self.log_std_head(h), -LOG_STD_CLAMP, LOG_STD_CLAMP)
        return LatentGaussian(mean, log_std)


class FusionHead(nn.Module):
    """Broadcast z to a feature map, concatenate, and run three 1x1 convolutions.

    The final conv is zero-initialized so the residual starts at zero and the
    untrained model reproduces the interpolated field exactly.
    """

    def __init__(self, feature_channels: int, latent_dim: int, out_channels: int,
                 act: str = "silu"):
        super().__init__()
        f = feature_channels
        self.conv1 = nn.Conv2d(f + latent_dim, f, 1)
        self.conv2 = nn.Conv2d(f, f, 1)
        self.conv3 = nn.Conv2d(f, out_channels, 1)
        self.act = _make_act(act)
        nn.init.zeros_(self.conv3.weight)
        nn.init.zeros_(self.conv3.bias)

    def forward(self, features: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        B, _, H, W = features.shape
        zmap = z[:, :, None, None].expand(B, z.shape[1], H, W)
        h = torch.cat((features, zmap), dim=1)
        h = self.act(self.conv1(h))
        h = self.act(self.conv2(h))
        return self.conv3(h)


class ProbUNet(nn.Module):
    """Backbone + prior/posterior latent networks + fusion head.

    Holds the training-split normalization stats as buffers, so physical-unit
    prediction (denormalize, then constrain) is a single code path:
    :meth:`to_physical`.
    """

    def __init__(self, config: ProbUNetConfig | None = None,
                 norm_stats: NormStats | None = None):
        super().__init__()
        cfg = config or ProbUNetConfig()
        self.config = cfg
        bb = cfg.backbone
        C = bb.in_channels
        self.backbone = UNetBackbone(bb)
        self.prior = LatentEncoder(C, cfg.latent_dim, bb.base_channels, bb.norm, bb.nonlinearity)
        self.posterior = LatentEncoder(2 * C, cfg.latent_dim, bb.base_channels,
                                       bb.norm, bb.nonlinearity)
        self.fusion = FusionHead(bb.out_feature_channels, cfg.latent_dim, C, bb.nonlinearity)
        if norm_stats is None:
            norm_stats = NormStats(np.zeros(C), np.ones(C))
        self.register_buffer("norm_mean", torch.tensor(norm_stats.mean, dtype=torch.float32))
        self.register_buffer("norm_std", torch.tensor(norm_stats.std, dtype=torch.float32))

    # --- normalization (mirrors fields.normalize for torch tensors) ---

    def normalize(self, phys: torch.Tensor) -> torch.Tensor:
        m = self.norm_mean.to(phys.dtype)[None, :, None, None]
        s = self.norm_std.to(phys.dtype)[None, :, None, None]
        return (phys - m) / s

    def denormalize(self, normed: torch.Tensor) -> torch.Tensor:
        m = self.norm_mean.to(normed.dtype)[None, :, None, None]
        s = self.norm_std.to(normed.dtype)[None, :, None, None]
        return normed * s + m

    # --- latent networks ---

    def prior_net(self, x_up: torch.Tensor) -> LatentGaussian:
        return self.prior(x_up)

    def posterior_net(self, x_up: torch.Tensor, y: torch.Tensor) -> LatentGaussian:
        return self.posterior(torch.cat((x_up, y), dim=1))

    # --- decoding ---

    def features(self, x_up: torch.Tensor) -> torch.Tensor:
        return self.backbone(x_up)

    def raw_base(self, x_up: torch.Tensor) -> torch.Tensor:
        """Normalized pre-constraint baseline equivalent to the interpolated input.

        to_physical(raw_base(x_up)) reproduces denormalize(x_up) exactly (up to
        the dry-pixel floor), so the zero-initialised fusion head starts at the
        interpolated field itself.
        """
        return self.normalize(raw_baseline(self.denormalize(x_up), self.config.constraint))

    def fuse_and_decode(self, x_up: torch.Tensor, features: torch.Tensor,
                        z: torch.Tensor) -> torch.Tensor:
        """Normalized pre-constraint prediction from features and a latent draw.

        The fusion residual is added to the baseline in raw space; adding it in
        normalized output space instead would warp the starting point through
        the softplus and pin dry pixels at softplus(0) ~ 0.69 mm/day.
        """
        return predict_residual(self.raw_base(x_up), self.fusion(features, z))

    def to_physical(self, pred_norm: torch.Tensor) -> torch.Tensor:
        """Denormalize and apply the physical constraints (the only exit path)."""
        return apply_constraints(self.denormalize(pred_norm), self.config.constraint)

    def predict_physical(self, x_up: torch.Tensor, z: torch.Tensor,
                         features: torch.Tensor | None = None) -> torch.Tensor:
        if features is None:
            features = self.features(x_up)
        return self.to_physical(self.fuse_and_decode(x_up, features, z))


@torch.no_grad()
def sample_ensemble(model: ProbUNet, x_up: torch.Tensor, members: int,
                    generator: torch.Generator | None = None,
                    seed: int | None = None) -> torch.Tensor:
    """Draw ``members`` realisations z ~ P(z|X) and decode each.

    The backbone runs once per input batch; only the fusion head repeats per
    member.  Returns physical-unit output [M, B, C, H, W].
    """
    if members < 1:
        raise ValueError("members must be >= 1")
    if generator is None:
        generator = torch.Generator()
        generator.manual_seed(0 if seed is None else seed)
    model.eval()
    feats = model.features(x_up)
    p = model.prior_net(x_up)
    out = []
    for _ in range(members):
        z = p.sample(generator)
        out.append(model.to_physical(model.fuse_and_decode(x_up, feats, z)))
    return torch.stack(out, dim=0)
