"""Optimization loop, checkpointing, and validation tracking.

Training consumes a data directory holding ``train.bin`` / ``val.bin`` plus a
``stats.json`` with the coarsening factor.  Coarse inputs are derived on the
fly (block mean, then nearest-neighbour upsampling) so the
coarsen-upsample round trip is exact by construction.  Normalization stats
and MS-SSIM dynamic ranges are computed from the training split only.

Each epoch appends one CSV row (step, epoch, recon_loss, kl, gamma,
val_loss); the final and best-validation checkpoints carry everything needed
to resume bit-reproducibly (optimizer moments plus RNG states) and a JSON
manifest with a sha256 content hash.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig
from .fields import (FieldTensor, NormStats, coarsen, compute_norm_stats,
                     read_tensor, upsample_nn_array)
from .losses import ObjectiveSpec, training_objective
from .model import ProbUNet, ProbUNetConfig

LOG_HEADER = "step,epoch,recon_loss,kl,gamma,val_loss"


class NonFiniteLossError(RuntimeError):
    """Raised when a training step produces NaN or infinite loss."""


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 2e-4
    seed: int = 0
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    gamma_max: float = 1e-2
    warmup_steps: int = 200
    base_channels: int = 64
    latent_dim: int = 16
    grad_clip: float = 1.0
    msssim_scales: int = 3
    msssim_window: int = 11

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


def iter_batches(n: int, batch_size: int, generator: torch.Generator):
    """Yield shuffled index tensors covering 0..n-1 once (last batch ragged)."""
    perm = torch.randperm(n, generator=generator)
    for lo in range(0, n, batch_size):
        yield perm[lo:lo + batch_size]


def prepare_arrays(t: FieldTensor, factor: int, stats: NormStats
                   ) -> tuple[torch.Tensor, torch.Tensor]:
    """(normalized upsampled coarse input, physical target), both [T,C,H,W]."""
    x_up = upsample_nn_array(coarsen(t, factor).values, factor)
    # normalize in place: x_up is a fresh array and a second copy of it
    # is the peak allocation when sampling long splits
    x_up -= stats.mean.astype(np.float32)[None, :, None, None]
    x_up /= stats.std.astype(np.float32)[None, :, None, None]
    return torch.from_numpy(x_up), torch.from_numpy(t.values)


def data_range_of(t: FieldTensor) -> np.ndarray:
    """Per-variable dynamic range (max - min) over the training split."""
    v = t.values
    rng = (v.max(axis=(0, 2, 3)).astype(np.float64)
           - v.min(axis=(0, 2, 3)).astype(np.float64))
    return np.maximum(rng, 1e-6)


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_log(path: Path, rows: list[tuple]) -> None:
    lines = [LOG_HEADER]
    for step, epoch, recon, kl, gamma, val in rows:
        lines.append(f"{step},{epoch},{_fmt(recon)},{_fmt(kl)},{_fmt(gamma)},{_fmt(val)}")
    path.write_text("\n".join(lines) + "\n")


def _architecture_dict(model: ProbUNet) -> dict:
    bb = model.config.backbone
    return {
        "in_channels": bb.in_channels,
        "base_channels": bb.base_channels,
        "channel_schedule": list(bb.channel_schedule),
        "norm": bb.norm,
        "nonlinearity": bb.nonlinearity,
        "latent_dim": model.config.latent_dim,
        "gamma_max": model.config.gamma_max,
        "warmup_steps": model.config.warmup_steps,
    }


def sha256_of(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _validate(model: ProbUNet, x_up: torch.Tensor, y: torch.Tensor,
              config: TrainConfig, data_range: torch.Tensor, seed: int) -> float:
    """Mean reconstruction loss over the validation split, gradient-free.

    The latent generator is re-seeded identically every call so epochs are
    comparable.
    """
    gen = torch.Generator()
    gen.manual_seed(seed ^ 0x5EED)
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for lo in range(0, x_up.shape[0], config.batch_size):
            xb = x_up[lo:lo + config.batch_size]
            yb = y[lo:lo + config.batch_size]
            parts = training_objective(
                model, xb, yb, config.objective, step=0,
                data_range=data_range, generator=gen,
                scales=config.msssim_scales, window_size=config.msssim_window)
            total += parts.recon * xb.shape[0]
            count += xb.shape[0]
    model.train()
    return total / count


def train(data_dir: str | Path, out_dir: str | Path, config: TrainConfig,
          resume: bool = False, on_batch=None) -> Path:
    """Run the full loop; returns the path of the final checkpoint.

    ``on_batch(split, indices)`` is an observability hook: it fires with the
    index tensor of every batch that contributes gradients ("train") or is
    scored for validation ("val"), letting tests assert split isolation.
    """
    data_dir, out_dir = Path(data_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = json.loads((data_dir / "stats.json").read_text())
    factor = int(meta["factor"])

    train_t = read_tensor(data_dir / "train.bin")
    val_t = read_tensor(data_dir / "val.bin")
    stats = compute_norm_stats(train_t)
    data_range = torch.from_numpy(data_range_of(train_t))
    x_train, y_train = prepare_arrays(train_t, factor, stats)
    x_val, y_val = prepare_arrays(val_t, factor, stats)
    n_train = x_train.shape[0]

    torch.manual_seed(config.seed)
    model = ProbUNet(
        ProbUNetConfig(latent_dim=config.latent_dim, gamma_max=config.gamma_max,
                       warmup_steps=config.warmup_steps,
                       backbone=BackboneConfig(base_channels=config.base_channels)),
        norm_stats=stats)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    g_data = torch.Generator()
    g_data.manual_seed(config.seed)
    g_latent = torch.Generator()
    g_latent.manual_seed(config.seed + 1)

    ckpt_path = out_dir / "checkpoint.pt"
    start_epoch, global_step, best_val = 0, 0, float("inf")
    rows: list[tuple] = []
    if resume:
        if not ckpt_path.exists():
            raise FileNotFoundError(f"no checkpoint to resume from at {ckpt_path}")
        state = torch.load(ckpt_path, weights_only=False)
        model.load_state_dict(state["model_state"])
        opt.load_state_dict(state["opt_state"])
        start_epoch = state["epoch"] + 1
        global_step = state["global_step"]
        best_val = state["best_val"]
        g_data.set_state(state["rng"]["g_data"])
        g_latent.set_state(state["rng"]["g_latent"])
        torch.set_rng_state(state["rng"]["torch"])
        rows = [tuple(r) for r in state["log_rows"]]

    def save(epoch: int, path: Path) -> None:
        torch.save({
            "model_state": model.state_dict(),
            "opt_state": opt.state_dict(),
            "epoch": epoch,
            "global_step": global_step,
            "best_val": best_val,
            "rng": {"g_data": g_data.get_state(),
                    "g_latent": g_latent.get_state(),
                    "torch": torch.get_rng_state()},
            "log_rows": rows,
            "train_config": dataclasses.asdict(config),
            "architecture": _architecture_dict(model),
            "norm_stats": stats.to_dict(),
            "data_range": data_range.tolist(),
            "var_names": list(train_t.var_names),
            "units": list(train_t.units),
            "factor": factor,
        }, path)

    best_epoch = -1
    for epoch in range(start_epoch, config.epochs):
        recon_sum, kl_sum, nb = 0.0, 0.0, 0
        gamma = 0.0
        for idx in iter_batches(n_train, config.batch_size, g_data):
            if on_batch is not None:
                on_batch("train", idx)
            parts = training_objective(
                model, x_train[idx], y_train[idx], config.objective, global_step,
                data_range=data_range, generator=g_latent,
                scales=config.msssim_scales, window_size=config.msssim_window)
            if not torch.isfinite(parts.total):
                raise NonFiniteLossError(
                    f"non-finite loss at step {global_step} (epoch {epoch}): "
                    f"recon={parts.recon} kl={parts.kl} gamma={parts.gamma}")
            opt.zero_grad()
            parts.total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            gamma = parts.gamma
            recon_sum += parts.recon * idx.shape[0]
            kl_sum += parts.kl * idx.shape[0]
            nb += idx.shape[0]
            global_step += 1
        if on_batch is not None:
            on_batch("val", torch.arange(x_val.shape[0]))
        val_loss = _validate(model, x_val, y_val, config, data_range, config.seed)
        rows.append((global_step, epoch, recon_sum / nb, kl_sum / nb, gamma, val_loss))
        _write_log(out_dir / "log.csv", rows)
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            save(epoch, out_dir / "checkpoint_best.pt")
        save(epoch, ckpt_path)

    manifest = {
        "content_hash": sha256_of(ckpt_path),
        "best_content_hash": sha256_of(out_dir / "checkpoint_best.pt")
        if (out_dir / "checkpoint_best.pt").exists() else None,
        "architecture": _architecture_dict(model),
        "objective": dataclasses.asdict(config.objective),
        "train_config": dataclasses.asdict(config),
        "norm_stats": stats.to_dict(),
        "data_range": data_range.tolist(),
        "var_names": list(train_t.var_names),
        "units": list(train_t.units),
        "factor": factor,
        "epochs_completed": config.epochs,
        "best_val": best_val,
        "best_epoch": best_epoch,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return ckpt_path


def load_checkpoint(path: str | Path) -> tuple[ProbUNet, dict]:
    """Rebuild the model from a checkpoint; returns (model in eval mode, state)."""
    state = torch.load(Path(path), weights_only=False)
    arch = state["architecture"]
    stats = NormStats.from_dict(state["norm_stats"])
    model = ProbUNet(
        ProbUNetConfig(latent_dim=arch["latent_dim"], gamma_max=arch["gamma_max"],
                       warmup_steps=arch["warmup_steps"],
                       backbone=BackboneConfig(in_channels=arch["in_channels"],
                                               base_channels=arch["base_channels"],
                                               norm=arch["norm"],
                                               nonlinearity=arch["nonlinearity"])),
        norm_stats=stats)
    model.load_state_dict(state["model_state"])
    model.eval()
    return model, state
