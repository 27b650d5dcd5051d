"""Command-line entry point: generate-data, train, sample, evaluate.

Configuration precedence is flags > JSON config file > defaults; unknown
config keys are rejected as usage errors.  Exit codes: 0 success, 1 runtime
failure, 2 usage error.  The environment variable PROBUNET_THREADS caps
torch's worker threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("probunet")


class UsageError(ValueError):
    """Bad flags or config: exit code 2."""


DEFAULTS = {
    "generate-data": {
        "out": None,
        "years": 10,
        "val_years": 2,
        "test_years": 30,
        "size": 64,
        "factor": 8,
        "seed": 0,
        "days_per_year": 365,
    },
    "train": {
        "data": None,
        "out": None,
        "loss": None,
        "epochs": 10,
        "batch_size": 32,
        "learning_rate": 2e-4,
        "seed": 0,
        "base_channels": 64,
        "latent_dim": 16,
        "gamma_max": 1e-2,
        "warmup_steps": 200,
        "grad_clip": 1.0,
        "members": 4,
        "msssim_scales": 3,
        "msssim_window": 11,
        "resume": False,
    },
    "sample": {
        "ckpt": None,
        "data": None,
        "out": None,
        "members": 5,
        "seed": 0,
        "batch_size": 32,
        "split": "test",
    },
    "evaluate": {
        "pred": None,
        "truth": None,
        "out": None,
        "factor": None,
        "bins": 100,
        "seed": 0,
        "bootstrap_samples": 1000,
        "cells": None,
        "fair_crps": False,
        "window": None,
        "days_per_year": 365,
        "no_figures": False,
    },
}


def _resolve_config(command: str, args: argparse.Namespace) -> dict:
    """defaults <- config file <- flags, rejecting unknown config keys."""
    cfg = dict(DEFAULTS[command])
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {config_path}")
        except json.JSONDecodeError as e:
            raise UsageError(f"config file is not valid JSON: {e}")
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise UsageError(
                f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(loaded)
    for key in cfg:
        flag = getattr(args, key.replace("-", "_"), None)
        if flag is not None:
            cfg[key] = flag
    missing = [k for k, v in cfg.items()
               if v is None and DEFAULTS[command][k] is None
               and k in _REQUIRED[command]]
    if missing:
        raise UsageError(f"{command} requires: {', '.join('--' + m for m in missing)}")
    return cfg


_REQUIRED = {
    "generate-data": ("out",),
    "train": ("data", "out", "loss"),
    "sample": ("ckpt", "data", "out"),
    "evaluate": ("pred", "truth", "out"),
}


def _parse_cells(text: str) -> tuple[tuple[int, int], ...]:
    """Parse "i,j;i,j" into cell coordinates."""
    try:
        cells = tuple(tuple(int(x) for x in part.split(",")) for part in text.split(";"))
    except ValueError:
        raise UsageError(f"bad --cells value {text!r}; expected like '32,32;16,16'")
    if any(len(c) != 2 for c in cells):
        raise UsageError(f"bad --cells value {text!r}; each cell needs two indices")
    return cells


def cmd_generate_data(cfg: dict) -> None:
    from .fields import SplitSpec, compute_norm_stats, split_tensor, write_tensor
    from .synthetic import SynthConfig, generate_synthetic
    from .trainer import data_range_of

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    synth = SynthConfig(days_per_year=cfg["days_per_year"])
    total_years = cfg["years"] + cfg["val_years"] + cfg["test_years"]
    t = generate_synthetic(total_years, (cfg["size"], cfg["size"]),
                           seed=cfg["seed"], config=synth)
    spec = SplitSpec.from_years(cfg["years"], cfg["val_years"], cfg["test_years"],
                                cfg["days_per_year"])
    parts = split_tensor(t, spec)
    for name, part in parts.items():
        write_tensor(out / f"{name}.bin", part)
    stats = compute_norm_stats(parts["train"])
    meta = {
        "size": cfg["size"],
        "factor": cfg["factor"],
        "seed": cfg["seed"],
        "days_per_year": cfg["days_per_year"],
        "years": {"train": cfg["years"], "val": cfg["val_years"],
                  "test": cfg["test_years"]},
        "vars": list(t.var_names),
        "units": list(t.units),
        "norm_mean": stats.mean.tolist(),
        "norm_std": stats.std.tolist(),
        "data_range": data_range_of(parts["train"]).tolist(),
        "synthetic": dataclasses.asdict(synth),
    }
    (out / "stats.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    log.info("wrote %s: train/val/test of %d/%d/%d years at %dx%d",
             out, cfg["years"], cfg["val_years"], cfg["test_years"],
             cfg["size"], cfg["size"])


def cmd_train(cfg: dict) -> None:
    from .losses import objective_from_name
    from .trainer import TrainConfig, train

    objective = objective_from_name(cfg["loss"])
    if objective.kind == "afcrps":
        try:
            objective = dataclasses.replace(objective, members=int(cfg["members"]))
        except ValueError as e:
            raise UsageError(str(e))
    tc = TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"], seed=cfg["seed"],
        objective=objective, gamma_max=cfg["gamma_max"],
        warmup_steps=cfg["warmup_steps"], base_channels=cfg["base_channels"],
        latent_dim=cfg["latent_dim"], grad_clip=cfg["grad_clip"],
        msssim_scales=cfg["msssim_scales"], msssim_window=cfg["msssim_window"])
    ckpt = train(cfg["data"], cfg["out"], tc, resume=cfg["resume"])
    log.info("checkpoint at %s", ckpt)


def cmd_sample(cfg: dict) -> None:
    import torch

    from .fields import NormStats, create_tensor_file, read_tensor
    from .trainer import load_checkpoint, prepare_arrays

    model, state = load_checkpoint(cfg["ckpt"])
    factor = state["factor"]
    stats = NormStats.from_dict(state["norm_stats"])
    data_path = Path(cfg["data"]) / f"{cfg['split']}.bin"
    truth = read_tensor(data_path)
    x_up, _ = prepare_arrays(truth, factor, stats)
    T, C, H, W = truth.values.shape
    M = int(cfg["members"])
    if M < 1:
        raise UsageError("--members must be >= 1")

    out = create_tensor_file(
        cfg["out"], (M * T, C, H, W), truth.var_names, truth.units,
        time_index=np.tile(np.asarray(truth.time_index), M),
        time_epoch=truth.time_epoch,
        attrs={"ensemble_members": M, "factor": factor, "seed": cfg["seed"],
               "split": cfg["split"], "checkpoint": str(cfg["ckpt"])})
    gen = torch.Generator()
    gen.manual_seed(int(cfg["seed"]))
    bs = int(cfg["batch_size"])
    with torch.no_grad():
        for lo in range(0, T, bs):
            xb = x_up[lo:lo + bs]
            feats = model.features(xb)
            prior = model.prior_net(xb)
            for j in range(M):
                z = prior.sample(gen)
                pred = model.to_physical(model.fuse_and_decode(xb, feats, z))
                out[j * T + lo:j * T + lo + xb.shape[0]] = pred.numpy()
    out.flush()
    log.info("wrote %d members x %d days to %s", M, T, cfg["out"])


def cmd_evaluate(cfg: dict) -> None:
    import importlib.resources

    import jsonschema

    from .diagnostics import EvalConfig, build_report

    cells = cfg["cells"]
    if isinstance(cells, str):
        cells = _parse_cells(cells)
    elif isinstance(cells, list):
        cells = tuple(tuple(int(x) for x in c) for c in cells)
    ec = EvalConfig(
        bins=cfg["bins"], cells=cells, days_per_year=cfg["days_per_year"],
        factor=cfg["factor"], bootstrap_samples=cfg["bootstrap_samples"],
        seed=cfg["seed"], fair_crps=cfg["fair_crps"], window=cfg["window"],
        figures=not cfg["no_figures"])
    report = build_report(cfg["pred"], cfg["truth"], cfg["out"], ec)
    schema = json.loads(importlib.resources.files("probunet")
                        .joinpath("report_schema.json").read_text())
    jsonschema.validate(report, schema)
    log.info("report at %s", Path(cfg["out"]) / "report.json")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="probunet",
        description="Probabilistic U-Net downscaling toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write synthetic train/val/test files")
    g.add_argument("--out", help="output directory")
    g.add_argument("--years", type=int, help="training years (default 10)")
    g.add_argument("--val-years", type=int, help="validation years (default 2)")
    g.add_argument("--test-years", type=int, help="test years (default 30)")
    g.add_argument("--size", type=int, help="high-res grid size (default 64)")
    g.add_argument("--factor", type=int, help="coarsening factor (default 8)")
    g.add_argument("--seed", type=int)
    g.add_argument("--days-per-year", type=int)
    g.add_argument("--config", help="JSON config file")

    t = sub.add_parser("train", help="train one objective")
    t.add_argument("--data", help="data directory from generate-data")
    t.add_argument("--out", help="output directory for checkpoint and log")
    t.add_argument("--loss", choices=["wmse", "msssim", "tuned", "afcrps"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--base-channels", type=int)
    t.add_argument("--latent-dim", type=int)
    t.add_argument("--gamma-max", type=float)
    t.add_argument("--warmup-steps", type=int)
    t.add_argument("--grad-clip", type=float)
    t.add_argument("--members", type=int, help="afCRPS training samples")
    t.add_argument("--msssim-scales", type=int)
    t.add_argument("--msssim-window", type=int)
    t.add_argument("--resume", action="store_const", const=True)
    t.add_argument("--config", help="JSON config file")

    s = sub.add_parser("sample", help="draw an ensemble from a checkpoint")
    s.add_argument("--ckpt", help="checkpoint file")
    s.add_argument("--data", help="data directory")
    s.add_argument("--members", type=int, help="ensemble size (default 5)")
    s.add_argument("--seed", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--split", choices=["train", "val", "test"])
    s.add_argument("--out", help="output ensemble file")
    s.add_argument("--config", help="JSON config file")

    e = sub.add_parser("evaluate", help="score predictions against truth")
    e.add_argument("--pred", help="prediction/ensemble tensor file")
    e.add_argument("--truth", help="ground-truth tensor file")
    e.add_argument("--out", help="report directory")
    e.add_argument("--factor", type=int, help="coarsening factor for the NN baseline")
    e.add_argument("--bins", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--bootstrap-samples", type=int)
    e.add_argument("--cells", help="report cells, e.g. '32,32;16,16'")
    e.add_argument("--fair-crps", action="store_const", const=True)
    e.add_argument("--window", choices=["hann"])
    e.add_argument("--days-per-year", type=int)
    e.add_argument("--no-figures", action="store_const", const=True)
    e.add_argument("--config", help="JSON config file")
    return parser


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    threads = os.environ.get("PROBUNET_THREADS")
    if threads:
        try:
            n = int(threads)
        except ValueError:
            print(f"error: PROBUNET_THREADS must be an integer, got {threads!r}",
                  file=sys.stderr)
            return 2
        import torch
        torch.set_num_threads(max(1, n))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args.command, args)
        log.info("resolved config: %s", json.dumps(cfg, sort_keys=True, default=str))
        COMMANDS[args.command](cfg)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        # tensor-format and schema errors land here; still a runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
