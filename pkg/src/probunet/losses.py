"""Training objectives.

Four named objectives share two reconstruction families:

* ``wmse_msssim``: lam * WMSE + (1 - lam) * (1 - MS-SSIM), with the
  exponential intensity weight w(y) = min(alpha * exp(beta * y), 1) applied
  at every pixel.  Named presets: "wmse" (lam=1), "msssim" (lam=0), "tuned"
  (lam=0.158).
* ``afcrps``: almost-fair CRPS over M latent samples ("afcrps", eta=0.95).

All reconstruction terms are evaluated in physical units, after
denormalization and the constraint layer.  The total objective adds the
warm-up-weighted KL between posterior and prior.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .fields import PR
from .model import ProbUNet, kl_divergence, kl_weight

# Exponent weights from the standard five-scale MS-SSIM formulation; the
# first `scales` entries are renormalized to sum to one.
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass
class ObjectiveSpec:
    """Configuration of one training objective.

    ``lam`` mixes WMSE against (1 - MS-SSIM); ``alpha``/``beta`` shape the
    precipitation intensity weight; ``eta`` sets the afCRPS fairness level;
    ``members`` is the training-time sample count for afCRPS.
    """

    kind: str = "wmse_msssim"
    lam: float = 1.0
    alpha: float = 0.007
    beta: float = 0.048
    eta: float = 0.95
    members: int = 4

    def __post_init__(self):
        if self.kind not in ("wmse_msssim", "afcrps"):
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must be in [0, 1]")
        if self.kind == "afcrps" and self.members < 2:
            raise ValueError("afcrps needs at least 2 members")


OBJECTIVE_NAMES = ("wmse", "msssim", "tuned", "afcrps")


def objective_from_name(name: str) -> ObjectiveSpec:
    """Map a CLI loss name to its spec: wmse / msssim / tuned / afcrps."""
    if name == "wmse":
        return ObjectiveSpec("wmse_msssim", lam=1.0)
    if name == "msssim":
        return ObjectiveSpec("wmse_msssim", lam=0.0)
    if name == "tuned":
        return ObjectiveSpec("wmse_msssim", lam=0.158)
    if name == "afcrps":
        return ObjectiveSpec("afcrps")
    raise ValueError(f"unknown objective {name!r}; choose from {OBJECTIVE_NAMES}")


def wmse(y: torch.Tensor, y_hat: torch.Tensor, alpha: float, beta: float) -> torch.Tensor:
    """Intensity-weighted MSE, weight w(y) = min(alpha * exp(beta * y), 1).

    The weight is a function of the target, so heavy-precipitation pixels
    approach plain MSE while drizzle is downweighted.
    """
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    w = torch.clamp(alpha * torch.exp(beta * y), max=1.0)
    return (w * (y - y_hat) ** 2).mean()


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2.0
    g = torch.exp(-(x ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def _ssim_terms(a: torch.Tensor, b: torch.Tensor, win: torch.Tensor,
                c1: float, c2: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean luminance and contrast/structure terms over valid window positions.

    a, b: [B, 1, H, W]; win: [k, k].
    """
    k = win.shape[0]
    kernel = win.reshape(1, 1, k, k)
    mu_a = torch.nn.functional.conv2d(a, kernel)
    mu_b = torch.nn.functional.conv2d(b, kernel)
    var_a = torch.nn.functional.conv2d(a * a, kernel) - mu_a ** 2
    var_b = torch.nn.functional.conv2d(b * b, kernel) - mu_b ** 2
    cov = torch.nn.functional.conv2d(a * b, kernel) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return lum.mean(), cs.mean()


def msssim(y: torch.Tensor, y_hat: torch.Tensor, data_range: float,
           scales: int = 3, window_size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """Multi-scale SSIM of two single-channel batches [B, 1, H, W] or [B, H, W].

    Contrast/structure at every scale, luminance folded in at the coarsest,
    combined by an exponent-weighted product.  Terms are clamped at zero
    before the fractional power so anticorrelated fields cannot produce NaN.
    """
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    if y.ndim == 3:
        y, y_hat = y[:, None], y_hat[:, None]
    if y.shape[1] != 1:
        raise ValueError("msssim operates on one channel at a time")
    if scales < 1 or scales > len(MSSSIM_WEIGHTS):
        raise ValueError(f"scales must be in [1, {len(MSSSIM_WEIGHTS)}]")
    if min(y.shape[-2:]) < window_size * 2 ** (scales - 1):
        raise ValueError(
            f"image {tuple(y.shape[-2:])} too small for {scales} scales "
            f"with window {window_size}")
    weights = torch.tensor(MSSSIM_WEIGHTS[:scales], dtype=y.dtype, device=y.device)
    weights = weights / weights.sum()
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    win = _gaussian_window(window_size, sigma, y.dtype, y.device)

    value = torch.ones((), dtype=y.dtype, device=y.device)
    a, b = y, y_hat
    for s in range(scales):
        lum, cs = _ssim_terms(a, b, win, c1, c2)
        if s < scales - 1:
            value = value * torch.relu(cs) ** weights[s]
            a = torch.nn.functional.avg_pool2d(a, 2)
            b = torch.nn.functional.avg_pool2d(b, 2)
        else:
            value = value * (torch.relu(lum) * torch.relu(cs)) ** weights[s]
    return value


def wmse_msssim_loss(y: torch.Tensor, y_hat: torch.Tensor, spec: ObjectiveSpec,
                     data_range: torch.Tensor | None = None,
                     scales: int = 3, window_size: int = 11,
                     sigma: float = 1.5) -> torch.Tensor:
    """lam * WMSE + (1 - lam) * (1 - MS-SSIM), per channel, averaged.

    The exponential weight w(y) = min(alpha * exp(beta * y), 1) applies at
    every pixel of every channel, as in the loss definition; for temperature
    values it sits near alpha and varies little, so it acts as an overall
    scale that keeps the channels comparable to the weighted precipitation
    term.  ``data_range`` gives the per-channel dynamic range for MS-SSIM and
    is required whenever lam < 1.
    """
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {tuple(y.shape)} vs {tuple(y_hat.shape)}")
    if spec.lam < 1.0 and data_range is None:
        raise ValueError("data_range is required when lam < 1")
    C = y.shape[1]
    total = torch.zeros((), dtype=y.dtype, device=y.device)
    for c in range(C):
        yc, hc = y[:, c], y_hat[:, c]
        loss_c = spec.lam * wmse(yc, hc, spec.alpha, spec.beta)
        if spec.lam < 1.0:
            ms = msssim(yc, hc, float(data_range[c]), scales, window_size, sigma)
            loss_c = loss_c + (1.0 - spec.lam) * (1.0 - ms)
        total = total + loss_c
    return total / C


def afcrps(members: torch.Tensor, y: torch.Tensor, eta: float) -> torch.Tensor:
    """Almost-fair CRPS of an M-member ensemble, averaged over pixels.

    members: [M, ...] stacked along dim 0 against target y [...].
    With epsilon = (1 - eta) / M the spread term is scaled by (1 - epsilon);
    eta = 1 recovers the fair (unbiased) CRPS estimator.
    """
    M = members.shape[0]
    if M < 2:
        raise ValueError("afcrps needs at least 2 members")
    if members.shape[1:] != y.shape:
        raise ValueError(f"members {tuple(members.shape)} do not stack over "
                         f"target {tuple(y.shape)}")
    eps = (1.0 - eta) / M
    term1 = (members - y[None]).abs().mean(dim=0)
    spread = torch.zeros_like(y)
    for j in range(M):
        for k in range(j + 1, M):
            spread = spread + (members[j] - members[k]).abs()
    term2 = (1.0 - eps) / (M * (M - 1)) * spread
    return (term1 - term2).mean()


@dataclass
class LossParts:
    """One training step's loss decomposition (recon/kl/gamma logged per step)."""

    total: torch.Tensor
    recon: float
    kl: float
    gamma: float


def training_objective(model: ProbUNet, x_up_norm: torch.Tensor,
                       y_phys: torch.Tensor, spec: ObjectiveSpec, step: int,
                       data_range: torch.Tensor | None = None,
                       generator: torch.Generator | None = None,
                       scales: int = 3, window_size: int = 11,
                       sigma: float = 1.5) -> LossParts:
    """Full objective: reconstruction + warm-up-weighted KL(posterior || prior).

    Latent draws come from the posterior (it sees the target); afCRPS draws
    ``spec.members`` of them, the WMSE/MS-SSIM family draws one.  The shared
    backbone pass is reused across draws.
    """
    y_norm = model.normalize(y_phys)
    feats = model.features(x_up_norm)
    q = model.posterior_net(x_up_norm, y_norm)
    p = model.prior_net(x_up_norm)
    kl = kl_divergence(q, p).mean()

    if spec.kind == "afcrps":
        preds = [model.to_physical(model.fuse_and_decode(x_up_norm, feats, q.sample(generator)))
                 for _ in range(spec.members)]
        recon = afcrps(torch.stack(preds, dim=0), y_phys, spec.eta)
    else:
        pred = model.to_physical(model.fuse_and_decode(x_up_norm, feats, q.sample(generator)))
        recon = wmse_msssim_loss(y_phys, pred, spec, data_range,
                                 scales=scales, window_size=window_size, sigma=sigma)

    gamma = kl_weight(step, model.config.gamma_max, model.config.warmup_steps)
    total = recon + gamma * kl
    return LossParts(total, float(recon.detach()), float(kl.detach()), gamma)


def weight_saturation_threshold(alpha: float, beta: float) -> float:
    """Intensity beyond which the WMSE weight is capped at 1: ln(1/alpha)/beta."""
    return math.log(1.0 / alpha) / beta
