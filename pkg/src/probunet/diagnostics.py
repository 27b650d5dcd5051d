"""Distributional evaluation: histograms, spectra, scores, and the report.

``build_report`` compares an ensemble prediction file against a ground-truth
file and emits ``report.json``, ``tables/*.csv``, and ``figures/*.svg``.
Predictions are read through a memory map and processed in day blocks, so
multi-gigabyte ensemble files never load fully into memory.  Return-level
bands are always fit to the ground truth; predictions contribute empirical
points only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import extremes
from .fields import FieldTensor, coarsen, read_tensor, upsample_nn, upsample_nn_array

DAY_BLOCK = 64


class AlignmentError(ValueError):
    """Prediction and truth files disagree on the time axis."""


# --- scores ---

def crps_map(members: np.ndarray, y: np.ndarray, fair: bool = False) -> np.ndarray:
    """Per-pixel ensemble CRPS: members [M, ...] against target [...].

    Standard estimator (1/M)Sum|m_j - y| - (1/(2 M^2)) SumSum|m_j - m_k|;
    ``fair`` switches the spread normalization to 1/(2 M (M-1)).
    """
    M = members.shape[0]
    if M < 1:
        raise ValueError("need at least 1 member")
    if fair and M < 2:
        raise ValueError("fair CRPS needs at least 2 members")
    if members.shape[1:] != y.shape:
        raise ValueError(f"members {members.shape} do not stack over {y.shape}")
    term1 = np.abs(members - y[None]).mean(axis=0)
    spread = np.zeros_like(y, dtype=np.float64)
    for j in range(M):
        for k in range(j + 1, M):
            spread += np.abs(members[j] - members[k])
    denom = M * (M - 1) if fair else M * M
    return term1 - spread / denom


def ensemble_crps(members: np.ndarray, y: np.ndarray, fair: bool = False) -> float:
    """Pixel-averaged ensemble CRPS (see :func:`crps_map`)."""
    return float(crps_map(np.asarray(members, dtype=np.float64),
                          np.asarray(y, dtype=np.float64), fair=fair).mean())


def mae(pred: np.ndarray, y: np.ndarray) -> float:
    pred, y = np.asarray(pred), np.asarray(y)
    if pred.shape != y.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {y.shape}")
    return float(np.abs(pred.astype(np.float64) - y.astype(np.float64)).mean())


def nn_baseline(lr: FieldTensor, factor: int) -> FieldTensor:
    """The reference baseline: nearest-neighbour upsampling of the coarse field."""
    return upsample_nn(lr, factor)


# --- histograms and spectra ---

def log_freq_histogram(values: np.ndarray, bins: int = 100,
                       value_range: tuple[float, float] | None = None
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Histogram of pooled pixel values; edges linear, frequency axis log-drawn.

    Returns (edges [bins+1], counts [bins]).
    """
    v = np.asarray(values).ravel()
    if v.size == 0:
        raise ValueError("empty input")
    counts, edges = np.histogram(v, bins=bins, range=value_range)
    return edges, counts


@dataclass
class PSDResult:
    """Azimuthally averaged power spectrum.

    ``wavenumbers`` are integer radial bins (cycles per grid length) from 0 to
    the corner wavenumber, so ``sum(power * n_modes)`` preserves total
    spectral power (Parseval).  Bins above the Nyquist index are corner modes.
    """

    wavenumbers: np.ndarray
    power: np.ndarray
    n_modes: np.ndarray

    def __post_init__(self):
        if np.any(self.power < 0):
            raise ValueError("power must be non-negative")

    @property
    def nyquist(self) -> int:
        return int(self.wavenumbers[-1])

    def total_power(self) -> float:
        return float((self.power * self.n_modes).sum())


def azimuthal_psd(fields: np.ndarray, window: str | None = None) -> PSDResult:
    """Radially binned |FFT|^2 of a square field, or mean over a [T, H, W] stack.

    Modes are binned by r = round(sqrt(kx^2 + ky^2)) over signed integer
    frequencies; the bin mean is the reported power.  ``window="hann"``
    applies a separable Hann taper first (sensitivity checks only).
    """
    f = np.asarray(fields, dtype=np.float64)
    if f.ndim == 2:
        f = f[None]
    if f.ndim != 3 or f.shape[-1] != f.shape[-2]:
        raise ValueError(f"need a square field or stack, got {f.shape}")
    n = f.shape[-1]
    if window == "hann":
        w = np.hanning(n)
        f = f * (w[:, None] * w[None, :])
    elif window is not None:
        raise ValueError(f"unknown window {window!r}")
    k = np.fft.fftfreq(n, d=1.0 / n)
    r = np.rint(np.sqrt(k[:, None] ** 2 + k[None, :] ** 2)).astype(np.int64)
    spec = np.abs(np.fft.fft2(f)) ** 2
    mean_spec = spec.mean(axis=0)
    n_modes = np.bincount(r.ravel())
    power = np.bincount(r.ravel(), weights=mean_spec.ravel()) / n_modes
    return PSDResult(np.arange(n_modes.size, dtype=np.float64), power,
                     n_modes.astype(np.int64))


class _PSDAccumulator:
    """Streaming mean of azimuthal spectra over many fields."""

    def __init__(self, window: str | None = None):
        self.window = window
        self._sum = None
        self._count = 0

    def add(self, fields: np.ndarray) -> None:
        res = azimuthal_psd(fields, window=self.window)
        n = fields.shape[0] if fields.ndim == 3 else 1
        weighted = res.power * n
        if self._sum is None:
            self._sum = weighted
            self._modes = res.n_modes
        else:
            self._sum += weighted
        self._count += n

    def result(self) -> PSDResult:
        if self._sum is None:
            raise ValueError("no fields accumulated")
        return PSDResult(np.arange(self._sum.size, dtype=np.float64),
                         self._sum / self._count, self._modes)


# --- report ---

@dataclass
class EvalConfig:
    bins: int = 100
    cells: tuple[tuple[int, int], ...] | None = None
    days_per_year: int = 365
    factor: int | None = None
    bootstrap_samples: int = 1000
    seed: int = 0
    fair_crps: bool = False
    window: str | None = None
    figures: bool = True

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("bins must be >= 2")
        if self.cells is not None:
            self.cells = tuple((int(i), int(j)) for i, j in self.cells)


def default_cells(H: int, W: int) -> tuple[tuple[int, int], tuple[int, int]]:
    """The two report cells: grid center and the upper-left quarter point."""
    return ((H // 2, W // 2), (H // 4, W // 4))


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def _write_csv(path: Path, header: str, rows: list[tuple]) -> None:
    lines = [header]
    for row in rows:
        lines.append(",".join(x if isinstance(x, str) else _fmt(x) for x in row))
    path.write_text("\n".join(lines) + "\n")


def _mean_std(daily: np.ndarray) -> tuple[float, float]:
    return float(daily.mean()), float(daily.std())


def _check_alignment(truth: FieldTensor, pred: FieldTensor) -> int:
    """Returns the member count M after verifying the time axes line up."""
    members = int(pred.attrs.get("ensemble_members", 1))
    T = truth.values.shape[0]
    if pred.values.shape[0] != members * T:
        raise AlignmentError(
            f"prediction has {pred.values.shape[0]} frames, expected "
            f"{members} members x {T} days")
    if pred.values.shape[1:] != truth.values.shape[1:]:
        raise AlignmentError(
            f"grid mismatch: {pred.values.shape[1:]} vs {truth.values.shape[1:]}")
    if truth.time_index is not None and pred.time_index is not None:
        if not np.array_equal(np.asarray(pred.time_index)[:T],
                              np.asarray(truth.time_index)):
            raise AlignmentError("prediction and truth time indices differ")
    if pred.var_names != truth.var_names:
        raise AlignmentError(
            f"variable mismatch: {pred.var_names} vs {truth.var_names}")
    return members


def _extremes_block(truth_series: dict, model_series: dict, cells, var_names,
                    cfg: EvalConfig) -> tuple[dict, list, list]:
    """GEV bands from truth plus empirical coverage for truth and model points."""
    curve_rows, point_rows = [], []
    per_cell: dict = {v: {} for v in var_names}
    pooled = {"truth": [0, 0], "model": [0, 0]}
    gev_params: dict = {v: {} for v in var_names}
    curves: dict = {v: {} for v in var_names}
    for v, v_name in enumerate(var_names):
        for cell in cells:
            key = f"{cell[0]},{cell[1]}"
            t_max = extremes.annual_maxima(truth_series[(v_name, cell)],
                                           cfg.days_per_year)
            params = extremes.fit_gev(t_max)
            gev_params[v_name][key] = {"mu": params.mu, "sigma": params.sigma,
                                       "xi": params.xi}
            emp_t = extremes.empirical_return_levels(t_max)
            emp_m = extremes.empirical_return_levels(model_series[(v_name, cell)])
            t_lo = min(emp_t[0][0], emp_m[0][0])
            t_hi = max(emp_t[0][-1], emp_m[0][-1])
            grid = np.geomspace(max(1.0005, 0.999 * t_lo), 1.02 * t_hi, 40)
            curve = extremes.bootstrap_bands(
                params, n_years=t_max.size, B=cfg.bootstrap_samples,
                seed=cfg.seed, periods=grid, cell=cell)
            curves[v_name][key] = (curve, emp_t, emp_m)
            frac_t = extremes.coverage_verdict(curve, *emp_t)
            frac_m = extremes.coverage_verdict(curve, *emp_m)
            per_cell[v_name][key] = {
                "truth_fraction": frac_t,
                "model_fraction": frac_m,
                "truth_good": frac_t >= extremes.GOOD_COVERAGE,
                "model_good": frac_m >= extremes.GOOD_COVERAGE,
                "n_truth_points": int(emp_t[0].size),
                "n_model_points": int(emp_m[0].size),
            }
            pooled["truth"][0] += frac_t * emp_t[0].size
            pooled["truth"][1] += emp_t[0].size
            pooled["model"][0] += frac_m * emp_m[0].size
            pooled["model"][1] += emp_m[0].size
            for T_, pt, lo, hi in zip(curve.periods, curve.point,
                                      curve.lower95, curve.upper95):
                curve_rows.append((v_name, cell[0], cell[1], T_, pt, lo, hi))
            for src, (ts, ys) in (("truth", emp_t), ("model", emp_m)):
                for T_, y_ in zip(ts, ys):
                    point_rows.append((v_name, cell[0], cell[1], src, T_, y_))
    coverage = {
        "cells": [list(c) for c in cells],
        "per_cell": per_cell,
        "pooled_truth_fraction": pooled["truth"][0] / pooled["truth"][1],
        "pooled_model_fraction": pooled["model"][0] / pooled["model"][1],
    }
    coverage["pooled_truth_good"] = (
        coverage["pooled_truth_fraction"] >= extremes.GOOD_COVERAGE)
    coverage["pooled_model_good"] = (
        coverage["pooled_model_fraction"] >= extremes.GOOD_COVERAGE)
    return {"coverage": coverage, "gev": gev_params, "curves": curves}, \
        curve_rows, point_rows


def build_report(pred_path: str | Path, truth_path: str | Path,
                 out_dir: str | Path, config: EvalConfig | None = None) -> dict:
    """Stream the ensemble file against truth and write the report directory.

    Returns the report dictionary (also written to ``report.json``).
    """
    cfg = config or EvalConfig()
    out_dir = Path(out_dir)
    (out_dir / "tables").mkdir(parents=True, exist_ok=True)
    (out_dir / "figures").mkdir(parents=True, exist_ok=True)

    truth = read_tensor(truth_path)
    pred = read_tensor(pred_path, mmap=True)
    M = _check_alignment(truth, pred)
    T, C, H, W = truth.values.shape
    var_names = truth.var_names
    cells = cfg.cells or default_cells(H, W)
    for i, j in cells:
        if not (0 <= i < H and 0 <= j < W):
            raise ValueError(f"cell ({i}, {j}) outside the {H}x{W} grid")
    factor = cfg.factor
    if factor is None and "factor" in pred.attrs:
        factor = int(pred.attrs["factor"])

    # pass 1: value ranges for shared histogram edges
    t_min = truth.values.min(axis=(0, 2, 3)).astype(np.float64)
    t_max = truth.values.max(axis=(0, 2, 3)).astype(np.float64)
    p_min, p_max = t_min.copy(), t_max.copy()
    for lo in range(0, M * T, DAY_BLOCK):
        chunk = np.asarray(pred.values[lo:lo + DAY_BLOCK])
        p_min = np.minimum(p_min, chunk.min(axis=(0, 2, 3)))
        p_max = np.maximum(p_max, chunk.max(axis=(0, 2, 3)))
    edges = [np.linspace(p_min[c], max(p_max[c], p_min[c] + 1e-6), cfg.bins + 1)
             for c in range(C)]

    # pass 2: scores, histograms, spectra, and per-cell series
    daily_crps = np.zeros((C, T))
    daily_mae = np.zeros((C, T))
    hist_truth = [np.zeros(cfg.bins, dtype=np.int64) for _ in range(C)]
    hist_model = [np.zeros(cfg.bins, dtype=np.int64) for _ in range(C)]
    psd_truth = [_PSDAccumulator(cfg.window) for _ in range(C)]
    psd_model = [_PSDAccumulator(cfg.window) for _ in range(C)]
    model_series = {(v, cell): [] for v in var_names for cell in cells}

    for lo in range(0, T, DAY_BLOCK):
        hi = min(lo + DAY_BLOCK, T)
        yb = truth.values[lo:hi].astype(np.float64)
        mb = np.stack([np.asarray(pred.values[j * T + lo:j * T + hi])
                       for j in range(M)]).astype(np.float64)
        for c in range(C):
            cm = crps_map(mb[:, :, c], yb[:, c], fair=cfg.fair_crps)
            daily_crps[c, lo:hi] = cm.mean(axis=(1, 2))
            err = np.abs(mb[:, :, c].mean(axis=0) - yb[:, c])
            daily_mae[c, lo:hi] = err.mean(axis=(1, 2))
            hist_truth[c] += np.histogram(yb[:, c].ravel(), bins=edges[c])[0]
            hist_model[c] += np.histogram(mb[:, :, c].ravel(), bins=edges[c])[0]
            psd_truth[c].add(yb[:, c])
            psd_model[c].add(mb[:, :, c].reshape(-1, H, W))
        for v, v_name in enumerate(var_names):
            for cell in cells:
                # .copy() so the [M, block] slice does not pin the whole
                # day block in memory for the rest of the pass
                model_series[(v_name, cell)].append(
                    mb[:, :, v, cell[0], cell[1]].copy())

    # pooled annual maxima: per member, then concatenated across members
    truth_series, pooled_model = {}, {}
    for v, v_name in enumerate(var_names):
        for cell in cells:
            truth_series[(v_name, cell)] = truth.values[:, v, cell[0], cell[1]]
            blocks = np.concatenate(model_series[(v_name, cell)], axis=1)
            maxima = [extremes.annual_maxima(blocks[j], cfg.days_per_year)
                      for j in range(M)]
            pooled_model[(v_name, cell)] = np.concatenate(maxima)

    # NN baseline (needs the coarsening factor; omitted when unknown)
    nn_stats = {v: (None, None) for v in var_names}
    if factor is not None:
        nn_pred = upsample_nn_array(coarsen(truth, factor).values, factor)
        for c, v_name in enumerate(var_names):
            err = np.abs(nn_pred[:, c].astype(np.float64)
                         - truth.values[:, c].astype(np.float64))
            nn_stats[v_name] = _mean_std(err.mean(axis=(1, 2)))

    ext_block, curve_rows, point_rows = _extremes_block(
        truth_series, pooled_model, cells, var_names, cfg)

    metrics = {}
    for c, v_name in enumerate(var_names):
        crps_m, crps_s = _mean_std(daily_crps[c])
        mae_m, mae_s = _mean_std(daily_mae[c])
        metrics[v_name] = {
            "crps_mean": crps_m, "crps_std": crps_s,
            "mae_mean": mae_m, "mae_std": mae_s,
            "nn_mae_mean": nn_stats[v_name][0],
            "nn_mae_std": nn_stats[v_name][1],
        }

    report = {
        "schema_version": 1,
        "n_days": T,
        "members": M,
        "grid": [H, W],
        "variables": list(var_names),
        "units": list(truth.units),
        "factor": factor,
        "metrics": metrics,
        "coverage": ext_block["coverage"],
        "gev": ext_block["gev"],
        "config": {
            "bins": cfg.bins,
            "cells": [list(c) for c in cells],
            "days_per_year": cfg.days_per_year,
            "bootstrap_samples": cfg.bootstrap_samples,
            "seed": cfg.seed,
            "fair_crps": cfg.fair_crps,
            "window": cfg.window,
        },
    }

    _write_tables(out_dir / "tables", report, var_names, edges, hist_truth,
                  hist_model, psd_truth, psd_model, curve_rows, point_rows)
    if cfg.figures:
        _write_figures(out_dir / "figures", var_names, truth.units, edges,
                       hist_truth, hist_model, psd_truth, psd_model,
                       ext_block["curves"])
    (out_dir / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def _write_tables(tdir: Path, report: dict, var_names, edges, hist_truth,
                  hist_model, psd_truth, psd_model, curve_rows, point_rows) -> None:
    rows = []
    for v_name in var_names:
        m = report["metrics"][v_name]
        rows.append((v_name, m["crps_mean"], m["crps_std"], m["mae_mean"],
                     m["mae_std"], m["nn_mae_mean"], m["nn_mae_std"]))
    _write_csv(tdir / "metrics.csv",
               "variable,crps_mean,crps_std,mae_mean,mae_std,nn_mae_mean,nn_mae_std",
               rows)
    for c, v_name in enumerate(var_names):
        rows = [(edges[c][i], edges[c][i + 1], int(hist_truth[c][i]),
                 int(hist_model[c][i])) for i in range(len(hist_truth[c]))]
        rows = [(a, b, str(t), str(m)) for a, b, t, m in rows]
        _write_csv(tdir / f"histogram_{v_name}.csv",
                   "bin_left,bin_right,truth_count,model_count", rows)
        pt, pm = psd_truth[c].result(), psd_model[c].result()
        rows = [(str(int(pt.wavenumbers[i])), str(int(pt.n_modes[i])),
                 pt.power[i], pm.power[i]) for i in range(pt.wavenumbers.size)]
        _write_csv(tdir / f"psd_{v_name}.csv",
                   "wavenumber,n_modes,truth_power,model_power", rows)
    _write_csv(tdir / "return_levels.csv",
               "variable,cell_i,cell_j,period,point,lower95,upper95",
               [(v, str(i), str(j), T_, pt, lo, hi)
                for v, i, j, T_, pt, lo, hi in curve_rows])
    _write_csv(tdir / "empirical_points.csv",
               "variable,cell_i,cell_j,source,period,level",
               [(v, str(i), str(j), s, T_, y_)
                for v, i, j, s, T_, y_ in point_rows])


def _write_figures(fdir: Path, var_names, units, edges, hist_truth, hist_model,
                   psd_truth, psd_model, curves) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for c, v_name in enumerate(var_names):
        centers = 0.5 * (edges[c][:-1] + edges[c][1:])
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.step(centers, np.maximum(hist_truth[c], 0.5), where="mid",
                label="truth", color="k")
        ax.step(centers, np.maximum(hist_model[c], 0.5), where="mid",
                label="model", color="tab:red", alpha=0.8)
        ax.set_yscale("log")
        ax.set_xlabel(f"{v_name} [{units[c]}]")
        ax.set_ylabel("frequency")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(fdir / f"histogram_{v_name}.svg")
        plt.close(fig)

        pt, pm = psd_truth[c].result(), psd_model[c].result()
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.loglog(pt.wavenumbers[1:], pt.power[1:], label="truth", color="k")
        ax.loglog(pm.wavenumbers[1:], pm.power[1:], label="model",
                  color="tab:red", alpha=0.8)
        ax.set_xlabel("radial wavenumber")
        ax.set_ylabel("power")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(fdir / f"psd_{v_name}.svg")
        plt.close(fig)

        for key, (curve, emp_t, emp_m) in curves[v_name].items():
            fig, ax = plt.subplots(figsize=(5, 3.5))
            ax.fill_between(curve.periods, curve.lower95, curve.upper95,
                            alpha=0.25, color="tab:blue", label="95% band")
            ax.plot(curve.periods, curve.point, color="tab:blue", label="GEV fit")
            ax.plot(emp_t[0], emp_t[1], "k.", label="truth maxima")
            ax.plot(emp_m[0], emp_m[1], "x", color="tab:red", ms=4,
                    label="model maxima")
            ax.set_xscale("log")
            ax.set_xlabel("return period [years]")
            ax.set_ylabel(f"{v_name} [{units[c]}]")
            ax.legend(frameon=False, fontsize=8)
            fig.tight_layout()
            fig.savefig(fdir / f"return_levels_{v_name}_cell_{key.replace(',', '_')}.svg")
            plt.close(fig)
