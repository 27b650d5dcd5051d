"""Physical-constraint output layer.

Raw network outputs parameterize (pr_raw, tmin_raw, gap_raw) in physical
units.  The constrained fields are

    pr   = softplus(pr_raw)            > 0
    tmin = tmin_raw
    tmax = tmin + softplus(gap_raw)    > tmin

so non-negative precipitation and the tmax >= tmin ordering hold by
construction.  This is the single code path through which every loss and
metric sees model output.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

_LINEAR_CUTOVER = 30.0


@dataclass
class ConstraintConfig:
    shift: float = 1e-7  # the c in log(1 + exp(x + c))

    def __post_init__(self):
        if self.shift < 0:
            raise ValueError("shift must be >= 0")


def shifted_softplus(x: torch.Tensor, shift: float = 1e-7) -> torch.Tensor:
    """log(1 + exp(x + shift)), overflow-safe.

    For x + shift > 30 the result is x + shift to within float precision, so
    the linear branch is returned directly.
    """
    y = x + shift
    return torch.where(y > _LINEAR_CUTOVER, y, torch.log1p(torch.exp(torch.clamp(y, max=_LINEAR_CUTOVER))))


def apply_constraints(raw: torch.Tensor, config: ConstraintConfig | None = None) -> torch.Tensor:
    """Map raw (pr_raw, tmin_raw, gap_raw) channels to constrained (pr, tmin, tmax).

    ``raw`` is [..., 3, H, W] in physical units; shape is preserved.
    """
    cfg = config or ConstraintConfig()
    if raw.shape[-3] != 3:
        raise ValueError(f"expected 3 channels (pr_raw, tmin_raw, gap_raw), got {raw.shape[-3]}")
    pr_raw, tmin, gap_raw = raw.unbind(dim=-3)
    pr = shifted_softplus(pr_raw, cfg.shift)
    tmax = tmin + shifted_softplus(gap_raw, cfg.shift)
    return torch.stack((pr, tmin, tmax), dim=-3)


def inverse_softplus(y: torch.Tensor, shift: float = 1e-7) -> torch.Tensor:
    """The x with shifted_softplus(x, shift) = y, for y > 0.

    Above the linear cutover it is y - shift to within float precision; y <= 0
    has no preimage and produces -inf/nan, so callers clamp first.
    """
    x = torch.where(y > _LINEAR_CUTOVER, y,
                    torch.log(torch.expm1(torch.clamp(y, max=_LINEAR_CUTOVER))))
    return x - shift


def raw_baseline(phys: torch.Tensor, config: ConstraintConfig | None = None,
                 floor: float = 1e-2) -> torch.Tensor:
    """Raw (pr_raw, tmin_raw, gap_raw) channels whose constrained output is ``phys``.

    The right inverse of :func:`apply_constraints`: pr and the tmax - tmin gap
    are clamped to ``floor`` before inversion so dry pixels (pr = 0) map to a
    finite raw value with a live softplus gradient instead of -inf.
    """
    cfg = config or ConstraintConfig()
    if phys.shape[-3] != 3:
        raise ValueError(f"expected 3 channels (pr, tmin, tmax), got {phys.shape[-3]}")
    pr, tmin, tmax = phys.unbind(dim=-3)
    pr_raw = inverse_softplus(torch.clamp(pr, min=floor), cfg.shift)
    gap_raw = inverse_softplus(torch.clamp(tmax - tmin, min=floor), cfg.shift)
    return torch.stack((pr_raw, tmin, gap_raw), dim=-3)
