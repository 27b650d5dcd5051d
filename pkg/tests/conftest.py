"""Shared fixtures: a small synthetic data directory and a short training run.

Everything here runs at reduced scale (short years, 32x32 grids, narrow
networks) so the unit suite stays fast; the acceptance module runs the real
desk-scale pipeline.
"""

import json

import pytest
import torch

from probunet.cli import main as cli_main

torch.set_num_threads(1)

DAYS_PER_YEAR = 20
SIZE = 32
FACTOR = 4


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    """2/1/10 short years of 32x32 synthetic data (factor 4)."""
    out = tmp_path_factory.mktemp("data")
    rc = cli_main([
        "generate-data", "--out", str(out), "--years", "2", "--val-years", "1",
        "--test-years", "10", "--size", str(SIZE), "--factor", str(FACTOR),
        "--seed", "11", "--days-per-year", str(DAYS_PER_YEAR)])
    assert rc == 0
    return out


@pytest.fixture(scope="session")
def tiny_run_dir(tmp_path_factory, tiny_data_dir):
    """A 2-epoch WMSE run with a narrow backbone; returns the output dir."""
    out = tmp_path_factory.mktemp("run")
    rc = cli_main([
        "train", "--data", str(tiny_data_dir), "--out", str(out), "--loss",
        "wmse", "--epochs", "2", "--batch-size", "16", "--base-channels", "4",
        "--seed", "3"])
    assert rc == 0
    assert (out / "checkpoint.pt").exists()
    return out


@pytest.fixture(scope="session")
def tiny_manifest(tiny_run_dir):
    return json.loads((tiny_run_dir / "manifest.json").read_text())
