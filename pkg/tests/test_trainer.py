"""Training loop: logging, checkpointing, resume reproducibility, isolation."""

import json

import numpy as np
import pytest
import torch

import probunet.trainer as trainer_mod
from probunet.fields import FieldTensor, compute_norm_stats, read_tensor
from probunet.losses import LossParts, ObjectiveSpec
from probunet.trainer import (LOG_HEADER, NonFiniteLossError, TrainConfig,
                              data_range_of, iter_batches, load_checkpoint,
                              prepare_arrays, sha256_of, train)


def quick_config(**over):
    base = dict(epochs=2, batch_size=16, learning_rate=1e-3, seed=5,
                base_channels=4, latent_dim=8)
    base.update(over)
    return TrainConfig(**base)


class TestHelpers:
    def test_iter_batches_covers_once(self):
        gen = torch.Generator().manual_seed(0)
        batches = list(iter_batches(10, 4, gen))
        assert [len(b) for b in batches] == [4, 4, 2]
        assert sorted(torch.cat(batches).tolist()) == list(range(10))

    def test_iter_batches_deterministic(self):
        a = torch.cat(list(iter_batches(20, 8, torch.Generator().manual_seed(1))))
        b = torch.cat(list(iter_batches(20, 8, torch.Generator().manual_seed(1))))
        assert torch.equal(a, b)

    def test_prepare_arrays_shapes_and_target(self):
        rng = np.random.default_rng(0)
        t = FieldTensor(rng.normal(4, 2, size=(6, 3, 16, 16)).astype(np.float32))
        stats = compute_norm_stats(t)
        x_up, y = prepare_arrays(t, 4, stats)
        assert x_up.shape == y.shape == (6, 3, 16, 16)
        assert np.array_equal(y.numpy(), t.values)
        # coarse input is block-constant over factor-sized tiles
        blocks = x_up.numpy().reshape(6, 3, 4, 4, 4, 4)
        assert np.allclose(blocks, blocks[:, :, :, :1, :, :1])

    def test_data_range_of(self):
        vals = np.zeros((4, 3, 2, 2), dtype=np.float32)
        vals[:, 0] = np.linspace(0, 9, 16).reshape(4, 2, 2)
        vals[:, 1] = 5.0
        vals[0, 2, 0, 0], vals[1, 2, 1, 1] = -3.0, 7.0
        dr = data_range_of(FieldTensor(vals))
        assert dr[0] == pytest.approx(9.0)
        assert dr[1] == pytest.approx(1e-6)  # constant channel floored
        assert dr[2] == pytest.approx(10.0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=0.0)


class TestRunArtifacts:
    def test_log_schema(self, tiny_run_dir):
        lines = (tiny_run_dir / "log.csv").read_text().splitlines()
        assert lines[0] == LOG_HEADER
        assert len(lines) == 3  # header + one row per epoch
        for line in lines[1:]:
            parts = line.split(",")
            assert len(parts) == 6
            int(parts[0]), int(parts[1])
            [float(p) for p in parts[2:]]

    def test_manifest_content_hash(self, tiny_run_dir, tiny_manifest):
        assert tiny_manifest["content_hash"] == sha256_of(
            tiny_run_dir / "checkpoint.pt")
        best = tiny_run_dir / "checkpoint_best.pt"
        assert best.exists()
        assert tiny_manifest["best_content_hash"] == sha256_of(best)

    def test_manifest_architecture(self, tiny_manifest):
        arch = tiny_manifest["architecture"]
        assert arch["base_channels"] == 4
        assert arch["channel_schedule"] == [4, 8, 16, 16]
        assert tiny_manifest["epochs_completed"] == 2
        assert tiny_manifest["factor"] == 4

    def test_manifest_best_val_consistent(self, tiny_run_dir, tiny_manifest):
        rows = (tiny_run_dir / "log.csv").read_text().splitlines()[1:]
        vals = [float(r.split(",")[5]) for r in rows]
        assert tiny_manifest["best_val"] == pytest.approx(min(vals), rel=1e-12)
        _, state = load_checkpoint(tiny_run_dir / "checkpoint_best.pt")
        assert state["epoch"] == tiny_manifest["best_epoch"]

    def test_norm_stats_come_from_train_split(self, tiny_data_dir, tiny_manifest):
        got = tiny_manifest["norm_stats"]
        want = compute_norm_stats(read_tensor(tiny_data_dir / "train.bin"))
        other = compute_norm_stats(read_tensor(tiny_data_dir / "val.bin"))
        assert np.allclose(got["mean"], want.mean, rtol=1e-12)
        assert np.allclose(got["std"], want.std, rtol=1e-12)
        assert not np.allclose(got["mean"], other.mean, rtol=1e-6)

    def test_load_checkpoint_round_trip(self, tiny_run_dir):
        model, state = load_checkpoint(tiny_run_dir / "checkpoint.pt")
        assert not model.training
        assert state["var_names"] == ["pr", "tmin", "tmax"]
        assert state["factor"] == 4
        x = torch.randn(2, 3, 32, 32)
        with torch.no_grad():
            out = model.predict_physical(x, torch.zeros(2, model.config.latent_dim))
        assert out.shape == (2, 3, 32, 32)
        assert torch.isfinite(out).all()


class TestTrainingDynamics:
    def test_validation_improves(self, tiny_data_dir, tmp_path):
        train(tiny_data_dir, tmp_path, quick_config(epochs=4, batch_size=8))
        rows = (tmp_path / "log.csv").read_text().splitlines()[1:]
        vals = [float(r.split(",")[5]) for r in rows]
        assert min(vals[1:]) < vals[0]

    def test_nonfinite_loss_aborts(self, tiny_data_dir, tmp_path, monkeypatch):
        def poisoned(*args, **kwargs):
            return LossParts(torch.tensor(float("nan")), float("nan"), 0.0, 0.0)

        monkeypatch.setattr(trainer_mod, "training_objective", poisoned)
        with pytest.raises(NonFiniteLossError, match="non-finite"):
            train(tiny_data_dir, tmp_path, quick_config(epochs=1))

    def test_resume_without_checkpoint_rejected(self, tiny_data_dir, tmp_path):
        with pytest.raises(FileNotFoundError):
            train(tiny_data_dir, tmp_path, quick_config(), resume=True)

    def test_split_isolation_hook(self, tiny_data_dir, tmp_path):
        calls = []
        train(tiny_data_dir, tmp_path, quick_config(epochs=1),
              on_batch=lambda split, idx: calls.append((split, idx.clone())))
        n_train = read_tensor(tiny_data_dir / "train.bin").n_days
        n_val = read_tensor(tiny_data_dir / "val.bin").n_days
        train_calls = [idx for s, idx in calls if s == "train"]
        val_calls = [idx for s, idx in calls if s == "val"]
        # every training day is visited exactly once per epoch, none from val
        seen = torch.cat(train_calls)
        assert sorted(seen.tolist()) == list(range(n_train))
        assert len(val_calls) == 1
        assert val_calls[0].tolist() == list(range(n_val))
        # training batches all precede the validation pass
        order = [s for s, _ in calls]
        assert order == ["train"] * len(train_calls) + ["val"]


class TestReproducibility:
    def test_identical_reruns_byte_identical_logs(self, tiny_data_dir, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        train(tiny_data_dir, a, quick_config())
        train(tiny_data_dir, b, quick_config())
        assert (a / "log.csv").read_bytes() == (b / "log.csv").read_bytes()
        ma = json.loads((a / "manifest.json").read_text())
        mb = json.loads((b / "manifest.json").read_text())
        assert ma["content_hash"] == mb["content_hash"]

    def test_resume_matches_continuous_run(self, tiny_data_dir, tmp_path):
        cont, split = tmp_path / "cont", tmp_path / "split"
        train(tiny_data_dir, cont, quick_config(epochs=4))
        train(tiny_data_dir, split, quick_config(epochs=2))
        train(tiny_data_dir, split, quick_config(epochs=4), resume=True)
        assert ((cont / "log.csv").read_bytes()
                == (split / "log.csv").read_bytes())
        mc = json.loads((cont / "manifest.json").read_text())
        ms = json.loads((split / "manifest.json").read_text())
        assert mc["content_hash"] == ms["content_hash"]
        assert mc["best_val"] == ms["best_val"]