"""Gridded field containers, WeatherBench-style ingestion and standardization.

Fields are single-channel 2D arrays on a regular lat-lon grid.  The
low-resolution archive is 32x64 (5.625 deg) and the high-resolution one is
128x256; pairs are matched on identical timestamps.
"""
from __future__ import annotations

import dataclasses
import glob
import logging
import os
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    ConfigurationError,
    ContractError,
    DataError,
    DegenerateDataError,
    EmptyDatasetError,
    ShapeError,
)

logger = logging.getLogger(__name__)

KELVIN = "kelvin"
STANDARDIZED = "standardized"
UNITS = (KELVIN, STANDARDIZED)

LR_SPACING_DEG = 5.625
HR_SPACING_DEG = 1.40525
LR_SHAPE = (32, 64)
HR_SHAPE = (128, 256)
SCALE = 4
# the declared netCDF4 package, named explicitly rather than left to xarray's backend guess
NETCDF_ENGINE = "netcdf4"

_SYNTH_EPOCH = datetime(2000, 1, 1, tzinfo=timezone.utc)


def _as_utc(ts: datetime | None) -> datetime | None:
    if ts is None:
        return None
    if ts.tzinfo is None:
        return ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


@dataclass(frozen=True)
class GridField:
    """One single-channel field.  ``values`` is stored read-only."""

    values: np.ndarray
    units: str = STANDARDIZED
    grid_spacing_deg: float = HR_SPACING_DEG
    timestamp: datetime | None = None

    def __post_init__(self):
        arr = np.asarray(self.values)
        if arr.ndim != 2:
            raise ShapeError(f"GridField needs a 2D array, got shape {arr.shape}")
        if arr.shape[0] < 4 or arr.shape[1] < 4:
            raise ShapeError(f"GridField must be at least 4x4, got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise DataError("GridField values contain NaN or Inf")
        if self.units not in UNITS:
            raise ContractError(f"unknown units tag {self.units!r}")
        if not self.grid_spacing_deg > 0:
            raise ContractError("grid_spacing_deg must be positive")
        arr = arr.view()
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "timestamp", _as_utc(self.timestamp))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def replace(self, **changes) -> "GridField":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class PairedSample:
    lr: GridField
    hr: GridField
    timestamp: datetime

    def __post_init__(self):
        (h, w), (H, W) = self.lr.shape, self.hr.shape
        if (H, W) != (SCALE * h, SCALE * w):
            raise ShapeError(f"hr shape {self.hr.shape} is not {SCALE}x lr shape {self.lr.shape}")
        if self.lr.units != self.hr.units:
            raise ContractError("lr and hr must share units")
        ts = _as_utc(self.timestamp)
        for member in (self.lr, self.hr):
            if member.timestamp is not None and member.timestamp != ts:
                raise ContractError("lr/hr timestamps disagree with the pair timestamp")
        object.__setattr__(self, "timestamp", ts)


@dataclass(frozen=True)
class StandardizationStats:
    mean_lr: float
    std_lr: float
    mean_hr: float
    std_hr: float

    def __post_init__(self):
        for name in ("std_lr", "std_hr"):
            if not getattr(self, name) > 0:
                raise DegenerateDataError(f"{name} must be positive, got {getattr(self, name)}")

    def mean_std(self, resolution: str) -> tuple[float, float]:
        if resolution == "lr":
            return self.mean_lr, self.std_lr
        if resolution == "hr":
            return self.mean_hr, self.std_hr
        raise ContractError(f"resolution must be 'lr' or 'hr', got {resolution!r}")

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            for name in ("mean_lr", "std_lr", "mean_hr", "std_hr"):
                fh.write(f"{name}: {getattr(self, name)!r}\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "StandardizationStats":
        values = {}
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    key, _, val = line.partition(":")
                    values[key.strip()] = float(val)
        try:
            return cls(**{k: values[k] for k in ("mean_lr", "std_lr", "mean_hr", "std_hr")})
        except KeyError as exc:
            raise ConfigurationError(f"stats file {path} lacks field {exc}") from None

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class PairedDataset:
    samples: tuple[PairedSample, ...]
    split: str = "train"
    stats: StandardizationStats | None = None
    dropped: int = 0

    def __post_init__(self):
        samples = tuple(self.samples)
        object.__setattr__(self, "samples", samples)
        if self.split not in ("train", "validation"):
            raise ContractError(f"split must be train or validation, got {self.split!r}")
        if samples:
            lr_shape, hr_shape = samples[0].lr.shape, samples[0].hr.shape
            for prev, cur in zip(samples, samples[1:]):
                if cur.lr.shape != lr_shape or cur.hr.shape != hr_shape:
                    raise ShapeError("all samples in a dataset must share shapes")
                if not cur.timestamp > prev.timestamp:
                    raise ContractError("sample timestamps must be strictly increasing")

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    @property
    def units(self) -> str:
        return self.samples[0].hr.units if self.samples else STANDARDIZED

    def lr_array(self, dtype=np.float32) -> np.ndarray:
        return np.stack([s.lr.values for s in self.samples]).astype(dtype, copy=False)

    def hr_array(self, dtype=np.float32) -> np.ndarray:
        return np.stack([s.hr.values for s in self.samples]).astype(dtype, copy=False)


# ---------------------------------------------------------------------------
# ingestion


def hourly_timestamps(date_start: datetime, date_end: datetime,
                      month_filter: int | None = None) -> list[datetime]:
    """Hourly slots in ``[date_start, date_end)``, optionally restricted to one month."""
    start, end = _as_utc(date_start), _as_utc(date_end)
    if not start < end:
        raise ConfigurationError("date_start must precede date_end")
    out = []
    ts = start
    step = timedelta(hours=1)
    while ts < end:
        if month_filter is None or ts.month == month_filter:
            out.append(ts)
        ts += step
    return out


def _expand_paths(path: str | os.PathLike) -> list[str]:
    path = os.fspath(path)
    if os.path.isdir(path):
        files = sorted(glob.glob(os.path.join(path, "*.nc")))
    elif any(ch in path for ch in "*?["):
        files = sorted(glob.glob(path))
    else:
        files = [path]
    if not files:
        raise ConfigurationError(f"no NetCDF files found at {path}")
    for f in files:
        if not os.path.exists(f):
            raise ConfigurationError(f"archive {f} does not exist")
    return files


def _to_utc_datetimes(times: np.ndarray) -> list[datetime]:
    secs = times.astype("datetime64[s]").astype(np.int64)
    return [datetime.fromtimestamp(int(s), tz=timezone.utc) for s in secs]


def _read_archive(path: str | os.PathLike, variable: str, expected_shape: tuple[int, int],
                  keep) -> dict[datetime, np.ndarray]:
    import xarray as xr

    records: dict[datetime, np.ndarray] = {}
    for fname in _expand_paths(path):
        with xr.open_dataset(fname, engine=NETCDF_ENGINE) as ds:
            if variable not in ds.variables:
                raise ConfigurationError(f"variable {variable!r} missing from {fname}")
            da = ds[variable]
            if da.ndim != 3 or "time" not in da.dims:
                raise DataError(f"{fname}: {variable} must have dims (time, lat, lon), got {da.dims}")
            da = da.transpose("time", ...)
            if tuple(da.shape[1:]) != tuple(expected_shape):
                raise DataError(
                    f"{fname}: grid shape {tuple(da.shape[1:])} does not match expected {expected_shape}")
            stamps = _to_utc_datetimes(np.asarray(da["time"].values))
            idx = [i for i, ts in enumerate(stamps) if keep(ts)]
            if not idx:
                continue
            block = np.asarray(da.isel(time=idx).values, dtype=np.float32)
            for row, i in enumerate(idx):
                records[stamps[i]] = block[row]
    return records


def load_pairs(lr_path, hr_path, variable: str = "t2m", date_start: datetime | None = None,
               date_end: datetime | None = None, month_filter: int | None = None,
               split: str = "train") -> PairedDataset:
    """Read LR and HR archives and pair records with identical timestamps.

    ``lr_path``/``hr_path`` may each be a file, a directory of ``*.nc`` files
    or a glob.  Timestamps outside ``[date_start, date_end)`` or outside
    ``month_filter`` are skipped; timestamps present in only one archive are
    dropped and counted in ``PairedDataset.dropped``.
    """
    if date_start is None or date_end is None:
        raise ConfigurationError("date_start and date_end are required")
    start, end = _as_utc(date_start), _as_utc(date_end)
    if not start < end:
        raise ConfigurationError("date_start must precede date_end")

    def keep(ts):
        return start <= ts < end and (month_filter is None or ts.month == month_filter)

    lr_rec = _read_archive(lr_path, variable, LR_SHAPE, keep)
    hr_rec = _read_archive(hr_path, variable, HR_SHAPE, keep)
    candidates = set(lr_rec) | set(hr_rec)
    paired = sorted(set(lr_rec) & set(hr_rec))
    dropped = len(candidates) - len(paired)
    if not paired:
        raise EmptyDatasetError(
            f"no LR/HR pairs between {start:%Y-%m-%d} and {end:%Y-%m-%d} (month={month_filter})")
    if dropped:
        logger.warning("dropped %d timestamps without a counterpart", dropped)
    n_slots = len(hourly_timestamps(start, end, month_filter))
    if len(paired) < n_slots:
        logger.info("%d of %d hourly slots paired", len(paired), n_slots)

    samples = [
        PairedSample(
            lr=GridField(lr_rec[ts], KELVIN, LR_SPACING_DEG, ts),
            hr=GridField(hr_rec[ts], KELVIN, HR_SPACING_DEG, ts),
            timestamp=ts,
        )
        for ts in paired
    ]
    return PairedDataset(tuple(samples), split=split, stats=None, dropped=dropped)


# ---------------------------------------------------------------------------
# standardization


def _mean_std(arrays: Iterable[np.ndarray]) -> tuple[float, float]:
    arrays = list(arrays)
    n = sum(a.size for a in arrays)
    mean = sum(float(np.sum(a, dtype=np.float64)) for a in arrays) / n
    var = sum(float(np.sum((a.astype(np.float64) - mean) ** 2)) for a in arrays) / n
    return mean, float(np.sqrt(var))


def fit_stats(ds: PairedDataset) -> StandardizationStats:
    if not len(ds):
        raise EmptyDatasetError("cannot fit stats on an empty dataset")
    mean_lr, std_lr = _mean_std(s.lr.values for s in ds)
    mean_hr, std_hr = _mean_std(s.hr.values for s in ds)
    if std_lr == 0 or std_hr == 0:
        raise DegenerateDataError("training split has zero variance; cannot standardize")
    return StandardizationStats(mean_lr, std_lr, mean_hr, std_hr)


def _apply(f: GridField, mean: float, std: float) -> GridField:
    vals = (f.values.astype(np.float64) - mean) / std
    return f.replace(values=vals.astype(f.values.dtype, copy=False), units=STANDARDIZED)


def standardize(ds: PairedDataset, stats: StandardizationStats | None = None) -> PairedDataset:
    """Map each resolution to zero mean / unit variance.

    Without ``stats`` they are fitted on ``ds``, which must then be the
    training split.  Given stats are applied verbatim.
    """
    if ds.units != KELVIN:
        raise ContractError("dataset is already standardized")
    if stats is None:
        if ds.split != "train":
            raise ContractError("stats may only be fitted on the training split")
        stats = fit_stats(ds)
    samples = tuple(
        PairedSample(
            lr=_apply(s.lr, stats.mean_lr, stats.std_lr),
            hr=_apply(s.hr, stats.mean_hr, stats.std_hr),
            timestamp=s.timestamp,
        )
        for s in ds
    )
    return PairedDataset(samples, split=ds.split, stats=stats, dropped=ds.dropped)


def destandardize(f: GridField, stats: StandardizationStats, resolution: str) -> GridField:
    if f.units != STANDARDIZED:
        raise ContractError(f"destandardize expects standardized units, got {f.units!r}")
    mean, std = stats.mean_std(resolution)
    return f.replace(values=f.values * std + mean, units=KELVIN)


# ---------------------------------------------------------------------------
# synthetic data


def downsample(hr: GridField, factor: int) -> GridField:
    """Block-mean pooling over ``factor`` x ``factor`` cells."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise ShapeError(f"factor must be a positive integer, got {factor!r}")
    h, w = hr.shape
    if h % factor or w % factor:
        raise ShapeError(f"shape {hr.shape} not divisible by {factor}")
    pooled = hr.values.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return hr.replace(values=pooled, grid_spacing_deg=hr.grid_spacing_deg * factor)


def synth_field(seed: int, smoothness: float, shape: Sequence[int] = HR_SHAPE) -> np.ndarray:
    """Gaussian random field: white noise blurred with a Gaussian of ``smoothness`` pixels.

    Latitude is reflected and longitude wraps.  The output is rescaled by the
    analytic blur gain so pixels have unit variance in expectation.
    """
    if not smoothness > 0:
        raise ConfigurationError("smoothness must be positive")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(tuple(shape))
    smooth = ndimage.gaussian_filter(noise, smoothness, mode=("reflect", "wrap"))
    return smooth * (2.0 * np.sqrt(np.pi) * smoothness)


def synth_pair(seed: int, smoothness: float) -> PairedSample:
    ts = _SYNTH_EPOCH + timedelta(hours=int(seed))
    hr = GridField(synth_field(seed, smoothness), STANDARDIZED, HR_SPACING_DEG, ts)
    lr = downsample(hr, SCALE)
    return PairedSample(lr=lr, hr=hr, timestamp=ts)


def synth_dataset(seeds: Iterable[int], smoothness: float, split: str = "train") -> PairedDataset:
    seeds = sorted(int(s) for s in seeds)
    return PairedDataset(tuple(synth_pair(s, smoothness) for s in seeds), split=split)
