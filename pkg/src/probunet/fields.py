"""Gridded daily fields: container type, block coarsening, NN upsampling,
z-score normalization, and a portable binary tensor format.

The on-disk format is a single UTF-8 JSON header line

    {"shape": [T, C, H, W], "dtype": "float32-le", "vars": [...],
     "units": [...], "time_epoch": 0, "time_index": [...]}

terminated by ``\\n`` and followed by the raw little-endian float32 payload in
row-major [T, C, H, W] order.  Round-trips are bit-exact, including signed
zeros.  Unknown header keys are preserved in :attr:`FieldTensor.attrs`.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

PR = "pr"
TMIN = "tmin"
TMAX = "tmax"
DEFAULT_VARS = (PR, TMIN, TMAX)
DEFAULT_UNITS = ("mm/day", "degC", "degC")

_DTYPE_TAG = "float32-le"
_HEADER_KEYS = ("shape", "dtype", "vars", "units", "time_epoch", "time_index")
_MAX_HEADER_BYTES = 64 * 1024 * 1024


class TensorFormatError(Exception):
    """Base class for tensor-file format problems."""


class HeaderError(TensorFormatError):
    """Header line is missing, not valid JSON, or lacks required keys."""


class DtypeError(TensorFormatError):
    """Header declares a dtype this reader does not understand."""


class TruncatedPayloadError(TensorFormatError):
    """Payload byte count does not match the shape declared in the header."""


@dataclass
class FieldTensor:
    """A [T, C, H, W] stack of daily physical fields.

    ``values`` holds physical units (mm/day, degC).  Normalized arrays are
    plain ndarrays and never wrapped in this type.
    """

    values: np.ndarray
    var_names: tuple[str, ...] = DEFAULT_VARS
    units: tuple[str, ...] = DEFAULT_UNITS
    time_index: np.ndarray | None = None
    time_epoch: int = 0
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 4:
            raise ValueError(f"values must be 4-D [T,C,H,W], got shape {self.values.shape}")
        self.var_names = tuple(self.var_names)
        self.units = tuple(self.units)
        if len(self.var_names) != self.values.shape[1] or len(self.units) != len(self.var_names):
            raise ValueError(
                f"channel mismatch: {self.values.shape[1]} channels, "
                f"{len(self.var_names)} names, {len(self.units)} units"
            )
        if self.time_index is None:
            self.time_index = np.arange(self.values.shape[0], dtype=np.int64)
        else:
            self.time_index = np.asarray(self.time_index, dtype=np.int64)
            if self.time_index.shape != (self.values.shape[0],):
                raise ValueError("time_index length must equal T")

    @property
    def grid_size(self) -> tuple[int, int]:
        return self.values.shape[2], self.values.shape[3]

    @property
    def n_days(self) -> int:
        return self.values.shape[0]

    def channel(self, name: str) -> np.ndarray:
        return self.values[:, self.var_names.index(name)]

    def validate(self) -> None:
        """Check physical invariants: finite everywhere, pr >= 0, tmax >= tmin.

        Intended for ground truth and post-constraint model output; raises
        ValueError on the first violated invariant.  Reads the whole array.
        """
        if not np.isfinite(self.values).all():
            raise ValueError("field contains NaN or Inf entries")
        if PR in self.var_names and float(self.channel(PR).min()) < 0.0:
            raise ValueError("pr channel has negative entries")
        if TMIN in self.var_names and TMAX in self.var_names:
            gap = self.channel(TMAX) - self.channel(TMIN)
            if float(gap.min()) < 0.0:
                raise ValueError("tmax < tmin at some pixel")


@dataclass
class SplitSpec:
    """Disjoint, ordered train/val/test day-index intervals (half-open)."""

    train_range: tuple[int, int]
    val_range: tuple[int, int]
    test_range: tuple[int, int]
    test_extension_years: int = 0

    def __post_init__(self):
        ranges = (self.train_range, self.val_range, self.test_range)
        for lo, hi in ranges:
            if not lo < hi:
                raise ValueError(f"empty or inverted range ({lo}, {hi})")
        if not (self.train_range[1] <= self.val_range[0] and self.val_range[1] <= self.test_range[0]):
            raise ValueError("ranges must be disjoint and ordered train < val < test")

    @classmethod
    def from_years(cls, train_years, val_years, test_years, days_per_year=365,
                   test_extension_years=0):
        a = train_years * days_per_year
        b = a + val_years * days_per_year
        c = b + test_years * days_per_year
        return cls((0, a), (a, b), (b, c), test_extension_years=test_extension_years)

    @property
    def total_days(self) -> int:
        return self.test_range[1]


@dataclass
class NormStats:
    """Per-variable mean and standard deviation from the training split only."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ValueError("mean/std must be 1-D arrays of equal length")
        if np.any(self.std <= 0):
            raise ValueError("std must be > 0 for every variable")

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["mean"]), np.array(d["std"]))


def compute_norm_stats(t: FieldTensor) -> NormStats:
    """Per-variable mean/std with float64 accumulation.

    Call on the training split only; validation/test data must never enter.
    """
    vals = t.values.astype(np.float64, copy=False)
    mean = vals.mean(axis=(0, 2, 3))
    std = vals.std(axis=(0, 2, 3))
    if np.any(std <= 0):
        bad = [t.var_names[i] for i in np.nonzero(std <= 0)[0]]
        raise ValueError(f"zero standard deviation for variable(s) {bad}")
    return NormStats(mean, std)


def normalize(t: FieldTensor, stats: NormStats) -> FieldTensor:
    """Per-variable z-score.  Output values live in normalized space."""
    if len(stats.mean) != t.values.shape[1]:
        raise ValueError("stats channel count does not match tensor")
    m = stats.mean.astype(np.float32)[None, :, None, None]
    s = stats.std.astype(np.float32)[None, :, None, None]
    return FieldTensor((t.values - m) / s, t.var_names, t.units,
                       t.time_index, t.time_epoch, dict(t.attrs))


def denormalize(t: FieldTensor, stats: NormStats) -> FieldTensor:
    m = stats.mean.astype(np.float32)[None, :, None, None]
    s = stats.std.astype(np.float32)[None, :, None, None]
    return FieldTensor(t.values * s + m, t.var_names, t.units,
                       t.time_index, t.time_epoch, dict(t.attrs))


def coarsen(t: FieldTensor, factor: int) -> FieldTensor:
    """Block-average each factor x factor patch (mean-preserving).

    Accumulates in float64, stores float32.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    T, C, H, W = t.values.shape
    if H % factor or W % factor:
        raise ValueError(f"grid {H}x{W} not divisible by factor {factor}")
    v = t.values.reshape(T, C, H // factor, factor, W // factor, factor)
    out = v.mean(axis=(3, 5), dtype=np.float64).astype(np.float32)
    return FieldTensor(out, t.var_names, t.units, t.time_index, t.time_epoch, dict(t.attrs))


def upsample_nn(t: FieldTensor, factor: int) -> FieldTensor:
    """Nearest-neighbour upsampling: replicate each cell over a factor x factor block.

    ``coarsen(upsample_nn(x, f), f)`` recovers ``x`` exactly.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return FieldTensor(t.values.copy(), t.var_names, t.units,
                           t.time_index, t.time_epoch, dict(t.attrs))
    out = np.repeat(np.repeat(t.values, factor, axis=2), factor, axis=3)
    return FieldTensor(out, t.var_names, t.units, t.time_index, t.time_epoch, dict(t.attrs))


def upsample_nn_array(values: np.ndarray, factor: int) -> np.ndarray:
    """upsample_nn for bare arrays whose last two axes are spatial."""
    if factor == 1:
        return values
    return np.repeat(np.repeat(values, factor, axis=-2), factor, axis=-1)


def write_tensor(path, t: FieldTensor) -> None:
    """Serialize to the one-line-JSON-header + raw float32 payload format.

    Extra ``attrs`` entries are written as additional header keys; they may
    not shadow the reserved keys.
    """
    header = {
        "shape": list(t.values.shape),
        "dtype": _DTYPE_TAG,
        "vars": list(t.var_names),
        "units": list(t.units),
        "time_epoch": int(t.time_epoch),
        "time_index": np.asarray(t.time_index).tolist(),
    }
    for k, v in t.attrs.items():
        if k in _HEADER_KEYS:
            raise ValueError(f"attr {k!r} shadows a reserved header key")
        header[k] = v
    payload = np.ascontiguousarray(t.values, dtype="<f4")
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8"))
        f.write(b"\n")
        f.write(payload.tobytes())


def create_tensor_file(path, shape: tuple[int, int, int, int],
                       var_names=DEFAULT_VARS, units=DEFAULT_UNITS,
                       time_index=None, time_epoch: int = 0,
                       attrs: dict | None = None) -> np.memmap:
    """Write a header and return a writable memmap over the payload region.

    For building files too large to hold in memory (ensemble predictions):
    fill the returned [T, C, H, W] float32 memmap in slices, then flush it.
    The resulting file is readable with :func:`read_tensor`.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ValueError(f"shape must be [T, C, H, W], got {shape}")
    if time_index is None:
        time_index = np.arange(shape[0], dtype=np.int64)
    header = {
        "shape": list(shape),
        "dtype": _DTYPE_TAG,
        "vars": list(var_names),
        "units": list(units),
        "time_epoch": int(time_epoch),
        "time_index": np.asarray(time_index).tolist(),
    }
    for k, v in (attrs or {}).items():
        if k in _HEADER_KEYS:
            raise ValueError(f"attr {k!r} shadows a reserved header key")
        header[k] = v
    nbytes = 4 * int(np.prod(shape))
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8"))
        f.write(b"\n")
        offset = f.tell()
        if nbytes:
            f.seek(offset + nbytes - 1)
            f.write(b"\0")
    return np.memmap(path, mode="r+", dtype="<f4", offset=offset, shape=shape)


def read_tensor(path, mmap: bool = False) -> FieldTensor:
    """Read a tensor file; the exact inverse of :func:`write_tensor`.

    With ``mmap=True`` the payload is a read-only memory map, which keeps
    multi-GB ensemble files out of RAM.
    """
    with open(path, "rb") as f:
        raw = f.readline(_MAX_HEADER_BYTES)
        if not raw.endswith(b"\n"):
            raise HeaderError(f"{path}: missing newline-terminated header line")
        try:
            header = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise HeaderError(f"{path}: header is not valid JSON: {e}") from e
        if not isinstance(header, dict):
            raise HeaderError(f"{path}: header must be a JSON object")
        missing = [k for k in _HEADER_KEYS if k not in header]
        if missing:
            raise HeaderError(f"{path}: header lacks required keys {missing}")
        if header["dtype"] != _DTYPE_TAG:
            raise DtypeError(f"{path}: unsupported dtype {header['dtype']!r}")
        shape = tuple(int(x) for x in header["shape"])
        if len(shape) != 4 or any(s < 0 for s in shape):
            raise HeaderError(f"{path}: bad shape {shape}")
        offset = f.tell()
        f.seek(0, 2)
        nbytes = f.tell() - offset
        expected = 4 * int(np.prod(shape))
        if nbytes != expected:
            raise TruncatedPayloadError(
                f"{path}: payload has {nbytes} bytes, expected {expected} for shape {shape}"
            )
        if mmap:
            values = np.memmap(path, mode="r", dtype="<f4", offset=offset, shape=shape)
        else:
            f.seek(offset)
            values = np.fromfile(f, dtype="<f4").reshape(shape)
    attrs = {k: v for k, v in header.items() if k not in _HEADER_KEYS}
    return FieldTensor(values, tuple(header["vars"]), tuple(header["units"]),
                       np.asarray(header["time_index"], dtype=np.int64),
                       int(header["time_epoch"]), attrs)


def split_tensor(t: FieldTensor, spec: SplitSpec) -> dict[str, FieldTensor]:
    """Slice a tensor into train/val/test parts along time."""
    if t.n_days < spec.total_days:
        raise ValueError(f"tensor has {t.n_days} days, split needs {spec.total_days}")
    out = {}
    for name, (lo, hi) in (("train", spec.train_range), ("val", spec.val_range),
                           ("test", spec.test_range)):
        out[name] = FieldTensor(t.values[lo:hi], t.var_names, t.units,
                                t.time_index[lo:hi], t.time_epoch, dict(t.attrs))
    return out


def incomplete_year_warning(n_days: int, days_per_year: int) -> None:
    leftover = n_days % days_per_year
    if leftover:
        warnings.warn(f"dropping incomplete final year ({leftover} days)", stacklevel=3)
