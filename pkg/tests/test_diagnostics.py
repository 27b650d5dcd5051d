"""Spectra, histograms, ensemble scores, and the evaluation report."""

import json
import math
from pathlib import Path

import numpy as np
import pytest

import probunet
from probunet.diagnostics import (AlignmentError, EvalConfig, _PSDAccumulator,
                                  azimuthal_psd, build_report, crps_map,
                                  default_cells, ensemble_crps,
                                  log_freq_histogram, mae, nn_baseline)
from probunet.fields import DEFAULT_UNITS, DEFAULT_VARS, FieldTensor, write_tensor

# ------------------------------------------------------------------ psd


class TestAzimuthalPSD:
    def test_parseval(self):
        rng = np.random.default_rng(0)
        for n in (16, 32):
            x = rng.normal(size=(n, n))
            res = azimuthal_psd(x)
            # unnormalized FFT: sum |X|^2 = N^2 sum x^2
            assert res.total_power() / n ** 2 == pytest.approx(
                float((x ** 2).sum()), rel=1e-10)

    def test_constant_field_is_pure_dc(self):
        res = azimuthal_psd(np.full((16, 16), 3.0))
        assert res.power[0] == pytest.approx((3.0 * 256) ** 2, rel=1e-12)
        assert float(np.abs(res.power[1:]).max()) < 1e-12 * res.power[0]

    def test_single_cosine_lands_in_its_bin(self):
        n = 32
        i = np.arange(n)
        x = np.cos(2 * np.pi * 8 * i / n)[:, None] * np.ones((1, n))
        res = azimuthal_psd(x)
        in_bin = res.power[8] * res.n_modes[8]
        assert in_bin == pytest.approx(res.total_power(), rel=1e-10)

    def test_white_noise_spectrum_is_flat(self):
        n, t = 32, 1200
        rng = np.random.default_rng(1)
        res = azimuthal_psd(rng.normal(size=(t, n, n)))
        # E|X_k|^2 = n^2 for unit-variance white noise
        inner = res.power[1:n // 2]
        assert float(np.abs(inner / n ** 2 - 1.0).max()) < 0.05

    def test_bins_run_to_corner_wavenumber(self):
        res = azimuthal_psd(np.zeros((32, 32)) + 1.0)
        corner = round(math.sqrt(2) * 16)
        assert res.nyquist == corner
        assert res.wavenumbers.size == corner + 1
        assert int(res.n_modes.sum()) == 32 * 32

    def test_stack_averages_over_time(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 16, 16))
        stacked = azimuthal_psd(x)
        singles = [azimuthal_psd(x[i]).power for i in range(4)]
        assert np.allclose(stacked.power, np.mean(singles, axis=0), rtol=1e-12)

    def test_non_square_rejected(self):
        with pytest.raises(ValueError, match="square"):
            azimuthal_psd(np.zeros((16, 24)))

    def test_hann_window(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(16, 16))
        plain = azimuthal_psd(x)
        tapered = azimuthal_psd(x, window="hann")
        assert tapered.total_power() < plain.total_power()
        with pytest.raises(ValueError, match="window"):
            azimuthal_psd(x, window="tukey")

    def test_accumulator_matches_one_shot(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(10, 16, 16))
        acc = _PSDAccumulator()
        acc.add(x[:3])
        acc.add(x[3:])
        got = acc.result()
        want = azimuthal_psd(x)
        assert np.allclose(got.power, want.power, rtol=1e-12)
        assert np.array_equal(got.n_modes, want.n_modes)

    def test_empty_accumulator_rejected(self):
        with pytest.raises(ValueError):
            _PSDAccumulator().result()


# ------------------------------------------------------------------ crps


def crps_oracle(members, y, fair):
    M = members.shape[0]
    fm, fy = members.reshape(M, -1), y.ravel()
    denom = M * (M - 1) if fair else M * M
    out = []
    for n in range(fy.size):
        t1 = sum(abs(fm[j, n] - fy[n]) for j in range(M)) / M
        t2 = sum(abs(fm[j, n] - fm[k, n])
                 for j in range(M) for k in range(j + 1, M))
        out.append(t1 - t2 / denom)
    return float(np.mean(out))


class TestCRPS:
    def test_pinned_two_member(self):
        got = ensemble_crps(np.array([[0.0], [2.0]]), np.array([1.0]))
        assert got == pytest.approx(0.5, abs=1e-12)

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            M = int(rng.integers(2, 7))
            m = rng.normal(0, 2, size=(M, 3, 4))
            y = rng.normal(0, 2, size=(3, 4))
            fair = bool(rng.integers(2))
            assert ensemble_crps(m, y, fair=fair) == pytest.approx(
                crps_oracle(m, y, fair), rel=1e-10, abs=1e-12)

    def test_single_member_is_mae(self):
        rng = np.random.default_rng(6)
        m = rng.normal(size=(1, 8, 8))
        y = rng.normal(size=(8, 8))
        assert ensemble_crps(m, y) == pytest.approx(mae(m[0], y), rel=1e-12)

    def test_fair_needs_two_members(self):
        with pytest.raises(ValueError):
            crps_map(np.zeros((1, 4)), np.zeros(4), fair=True)

    def test_never_exceeds_mean_absolute_error_term(self):
        rng = np.random.default_rng(7)
        m = rng.normal(size=(5, 50))
        y = rng.normal(size=(50,))
        cm = crps_map(m, y)
        t1 = np.abs(m - y[None]).mean(axis=0)
        assert np.all(cm <= t1 + 1e-12)

    def test_gaussian_expectation_standard_estimator(self):
        # y, m_j ~ N(0,1) iid: E[estimator] = (2/sqrt(pi)) * (M+1) / (2M)
        M, n = 5, 40_000
        rng = np.random.default_rng(8)
        m = rng.normal(size=(M, n))
        y = rng.normal(size=n)
        cm = crps_map(m, y)
        want = (2.0 / math.sqrt(math.pi)) * (M + 1) / (2 * M)
        se = cm.std() / math.sqrt(n)
        assert abs(cm.mean() - want) < 4 * se

    def test_gaussian_expectation_fair_estimator(self):
        # fair estimator is unbiased for CRPS: E = 1/sqrt(pi) here
        M, n = 5, 40_000
        rng = np.random.default_rng(9)
        m = rng.normal(size=(M, n))
        y = rng.normal(size=n)
        cm = crps_map(m, y, fair=True)
        want = 1.0 / math.sqrt(math.pi)
        se = cm.std() / math.sqrt(n)
        assert abs(cm.mean() - want) < 4 * se

    def test_true_distribution_beats_shifted(self):
        M, n = 5, 20_000
        rng = np.random.default_rng(10)
        y = rng.normal(size=n)
        good = rng.normal(size=(M, n))
        biased = rng.normal(size=(M, n)) + 2.0
        assert ensemble_crps(good, y) < ensemble_crps(biased, y)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            crps_map(np.zeros((3, 4)), np.zeros(5))


class TestPointScores:
    def test_mae_pinned(self):
        assert mae(np.array([1.0, 2.0]), np.array([0.0, 4.0])) == 1.5

    def test_mae_shape_mismatch(self):
        with pytest.raises(ValueError):
            mae(np.zeros(3), np.zeros(4))

    def test_nn_baseline_block_constant(self):
        rng = np.random.default_rng(11)
        lr = FieldTensor(rng.normal(size=(2, 3, 4, 4)).astype(np.float32))
        up = nn_baseline(lr, 4)
        assert up.values.shape == (2, 3, 16, 16)
        assert np.array_equal(up.values,
                              lr.values.repeat(4, axis=2).repeat(4, axis=3))


class TestHistogram:
    def test_counts_and_edges(self):
        rng = np.random.default_rng(12)
        v = rng.normal(size=(7, 3, 5))
        edges, counts = log_freq_histogram(v, bins=20)
        assert edges.shape == (21,)
        assert counts.sum() == v.size

    def test_fixed_range(self):
        edges, counts = log_freq_histogram(np.array([0.5, 1.5, 99.0]), bins=10,
                                           value_range=(0.0, 10.0))
        assert edges[0] == 0.0 and edges[-1] == 10.0
        assert counts.sum() == 2  # 99.0 falls outside

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            log_freq_histogram(np.array([]))


# ---------------------------------------------------------------- report


def make_truth(rng, T=360, H=16, W=16):
    pr = rng.gamma(2.0, 2.0, size=(T, 1, H, W))
    tmin = rng.normal(5.0, 3.0, size=(T, 1, H, W))
    gap = rng.gamma(2.0, 1.0, size=(T, 1, H, W))
    vals = np.concatenate([pr, tmin, tmin + gap], axis=1).astype(np.float32)
    return FieldTensor(vals, DEFAULT_VARS, DEFAULT_UNITS)


def write_ensemble(path, truth, members, noise=0.0, rng=None, attrs=None):
    reps = [truth.values.copy() for _ in range(members)]
    if noise:
        for r in reps:
            r += rng.normal(0, noise, size=r.shape).astype(np.float32)
    vals = np.concatenate(reps, axis=0)
    base = {"ensemble_members": members, "factor": 4}
    base.update(attrs or {})
    t = FieldTensor(vals, truth.var_names, truth.units,
                    np.tile(truth.time_index, members), truth.time_epoch, base)
    write_tensor(path, t)
    return t


CFG = dict(bins=40, cells=((8, 8),), days_per_year=30, bootstrap_samples=200,
           figures=False)


@pytest.fixture(scope="module")
def perfect(tmp_path_factory):
    root = tmp_path_factory.mktemp("report")
    truth = make_truth(np.random.default_rng(20))
    write_tensor(root / "truth.bin", truth)
    write_ensemble(root / "pred.bin", truth, members=2)
    out = root / "eval"
    report = build_report(root / "pred.bin", root / "truth.bin", out,
                          EvalConfig(**CFG))
    return root, out, report


class TestBuildReport:
    def test_schema_valid(self, perfect):
        import jsonschema
        _, out, report = perfect
        schema = json.loads((Path(probunet.__file__).parent
                             / "report_schema.json").read_text())
        jsonschema.validate(report, schema)
        on_disk = json.loads((out / "report.json").read_text())
        jsonschema.validate(on_disk, schema)

    def test_perfect_prediction_scores_zero(self, perfect):
        _, _, report = perfect
        for v in DEFAULT_VARS:
            assert report["metrics"][v]["crps_mean"] == 0.0
            assert report["metrics"][v]["mae_mean"] == 0.0
            assert report["metrics"][v]["nn_mae_mean"] > 0.0

    def test_truth_points_covered(self, perfect):
        _, _, report = perfect
        cov = report["coverage"]
        assert cov["pooled_truth_fraction"] >= 0.95
        assert cov["pooled_truth_good"] is True
        # perfect model contributes the same maxima, duplicated
        assert cov["pooled_model_fraction"] == pytest.approx(
            cov["pooled_truth_fraction"], abs=0.05)

    def test_gev_parameters_recorded(self, perfect):
        _, _, report = perfect
        for v in DEFAULT_VARS:
            blk = report["gev"][v]["8,8"]
            assert blk["sigma"] > 0
            assert abs(blk["xi"]) <= 0.5

    def test_tables_written(self, perfect):
        _, out, _ = perfect
        names = {p.name for p in (out / "tables").iterdir()}
        want = {"metrics.csv", "return_levels.csv", "empirical_points.csv"}
        want |= {f"histogram_{v}.csv" for v in DEFAULT_VARS}
        want |= {f"psd_{v}.csv" for v in DEFAULT_VARS}
        assert names == want
        header = (out / "tables" / "metrics.csv").read_text().splitlines()[0]
        assert header.startswith("variable,crps_mean")

    def test_rerun_is_byte_identical(self, perfect, tmp_path):
        root, out, _ = perfect
        build_report(root / "pred.bin", root / "truth.bin", tmp_path,
                     EvalConfig(**CFG))
        assert ((tmp_path / "report.json").read_bytes()
                == (out / "report.json").read_bytes())
        for p in sorted((out / "tables").iterdir()):
            assert (tmp_path / "tables" / p.name).read_bytes() == p.read_bytes(), p.name

    def test_figures_written_when_enabled(self, perfect, tmp_path):
        root, _, _ = perfect
        cfg = dict(CFG, figures=True, bootstrap_samples=200)
        build_report(root / "pred.bin", root / "truth.bin", tmp_path,
                     EvalConfig(**cfg))
        figs = {p.name for p in (tmp_path / "figures").iterdir()}
        assert f"histogram_pr.svg" in figs
        assert f"psd_tmax.svg" in figs
        assert "return_levels_pr_cell_8_8.svg" in figs
        assert len(figs) == 9  # 3 hist + 3 psd + 3 vars x 1 cell

    def test_noisy_prediction_scores_positive(self, tmp_path):
        rng = np.random.default_rng(21)
        truth = make_truth(rng)
        write_tensor(tmp_path / "truth.bin", truth)
        write_ensemble(tmp_path / "pred.bin", truth, members=3, noise=1.0,
                       rng=rng)
        report = build_report(tmp_path / "pred.bin", tmp_path / "truth.bin",
                              tmp_path / "eval", EvalConfig(**CFG))
        for v in DEFAULT_VARS:
            assert report["metrics"][v]["crps_mean"] > 0.0
            assert report["metrics"][v]["mae_mean"] > 0.0

    def test_unknown_factor_omits_baseline(self, tmp_path):
        rng = np.random.default_rng(22)
        truth = make_truth(rng)
        write_tensor(tmp_path / "truth.bin", truth)
        t = FieldTensor(np.concatenate([truth.values] * 2, axis=0),
                        truth.var_names, truth.units,
                        np.tile(truth.time_index, 2), 0,
                        {"ensemble_members": 2})
        write_tensor(tmp_path / "pred.bin", t)
        report = build_report(tmp_path / "pred.bin", tmp_path / "truth.bin",
                              tmp_path / "eval", EvalConfig(**CFG))
        assert report["factor"] is None
        assert report["metrics"]["pr"]["nn_mae_mean"] is None


class TestAlignment:
    def setup_files(self, tmp_path, **kwargs):
        truth = make_truth(np.random.default_rng(23), T=8)
        write_tensor(tmp_path / "truth.bin", truth)
        return truth

    def test_frame_count_mismatch(self, tmp_path):
        truth = self.setup_files(tmp_path)
        t = FieldTensor(np.concatenate([truth.values] * 2, axis=0),
                        truth.var_names, truth.units,
                        np.tile(truth.time_index, 2), 0,
                        {"ensemble_members": 3})
        write_tensor(tmp_path / "pred.bin", t)
        with pytest.raises(AlignmentError, match="frames"):
            build_report(tmp_path / "pred.bin", tmp_path / "truth.bin",
                         tmp_path / "eval", EvalConfig(**CFG))

    def test_time_index_mismatch(self, tmp_path):
        truth = self.setup_files(tmp_path)
        t = FieldTensor(truth.values.copy(), truth.var_names, truth.units,
                        truth.time_index + 5, 0, {"ensemble_members": 1})
        write_tensor(tmp_path / "pred.bin", t)
        with pytest.raises(AlignmentError, match="time"):
            build_report(tmp_path / "pred.bin", tmp_path / "truth.bin",
                         tmp_path / "eval", EvalConfig(**CFG))

    def test_grid_mismatch(self, tmp_path):
        truth = self.setup_files(tmp_path)
        t = FieldTensor(truth.values[:, :, :8, :8].copy(), truth.var_names,
                        truth.units, truth.time_index, 0,
                        {"ensemble_members": 1})
        write_tensor(tmp_path / "pred.bin", t)
        with pytest.raises(AlignmentError, match="grid"):
            build_report(tmp_path / "pred.bin", tmp_path / "truth.bin",
                         tmp_path / "eval", EvalConfig(**CFG))

    def test_variable_mismatch(self, tmp_path):
        truth = self.setup_files(tmp_path)
        t = FieldTensor(truth.values.copy(), ("a", "b", "c"),
                        truth.units, truth.time_index, 0,
                        {"ensemble_members": 1})
        write_tensor(tmp_path / "pred.bin", t)
        with pytest.raises(AlignmentError, match="variable"):
            build_report(tmp_path / "pred.bin", tmp_path / "truth.bin",
                         tmp_path / "eval", EvalConfig(**CFG))

    def test_cell_outside_grid(self, tmp_path):
        truth = self.setup_files(tmp_path)
        write_ensemble(tmp_path / "pred.bin", truth, members=1)
        cfg = dict(CFG, cells=((99, 0),))
        with pytest.raises(ValueError, match="outside"):
            build_report(tmp_path / "pred.bin", tmp_path / "truth.bin",
                         tmp_path / "eval", EvalConfig(**cfg))


class TestEvalConfig:
    def test_default_cells(self):
        assert default_cells(64, 64) == ((32, 32), (16, 16))

    def test_bins_validated(self):
        with pytest.raises(ValueError):
            EvalConfig(bins=1)

    def test_cells_normalized(self):
        cfg = EvalConfig(cells=[(np.int64(3), np.int64(4))])
        assert cfg.cells == ((3, 4),)