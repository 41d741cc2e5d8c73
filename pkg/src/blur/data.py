"""Time-series ingestion, windowing, standardization and synthetic tasks."""
from __future__ import annotations

import calendar
import csv
import itertools
import math
import struct
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, IngestionError
from .training import Split, TaskData

TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"
TARGET_COLUMN = "OT"


@dataclass
class MultivariateSeries:
    timestamps: list
    values: np.ndarray
    columns: list
    target_index: int = -1

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.timestamps):
            raise IngestionError(f"values {self.values.shape} do not match {len(self.timestamps)} timestamps")
        if self.target_index < 0:
            self.target_index += self.values.shape[1]

    def __len__(self):
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def slice(self, start: int, stop: int) -> "MultivariateSeries":
        return MultivariateSeries(self.timestamps[start:stop], self.values[start:stop], list(self.columns),
                                  self.target_index)


# -- CSV -------------------------------------------------------------------------


def load_csv(path) -> MultivariateSeries:
    """Read ``date,<feature>,...`` rows; the target is the ``OT`` column if present, else the last."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"data file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        if len(header) < 2:
            raise IngestionError(f"{path}: need a timestamp column and at least one feature")
        stamps, rows = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                ts = datetime.strptime(row[0].strip(), TIMESTAMP_FORMAT)
            except ValueError:
                raise IngestionError(f"{path}:{line_no}: bad timestamp {row[0]!r}") from None
            try:
                vals = [float(x) for x in row[1:]]
            except ValueError:
                raise IngestionError(f"{path}:{line_no}: non-numeric value in row {row!r}") from None
            if not all(math.isfinite(v) for v in vals):
                raise IngestionError(f"{path}:{line_no}: non-finite value in row {row!r}")
            if stamps and ts <= stamps[-1]:
                raise IngestionError(f"{path}:{line_no}: timestamp {row[0]} is not after {stamps[-1]}")
            if len(stamps) >= 2 and ts - stamps[-1] != stamps[1] - stamps[0]:
                raise IngestionError(f"{path}:{line_no}: sampling interval {ts - stamps[-1]} differs from "
                                     f"the series interval {stamps[1] - stamps[0]}")
            stamps.append(ts)
            rows.append(vals)
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    columns = [c.strip() for c in header[1:]]
    target = columns.index(TARGET_COLUMN) if TARGET_COLUMN in columns else len(columns) - 1
    return MultivariateSeries(stamps, np.array(rows), columns, target)


def write_csv(series: MultivariateSeries, path) -> Path:
    """Write back with ``repr`` floats (shortest string that parses to the same double)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["date"] + list(series.columns))
        for ts, row in zip(series.timestamps, series.values):
            writer.writerow([ts.strftime(TIMESTAMP_FORMAT)] + [repr(float(v)) for v in row])
    return path


# -- splitting and windows -------------------------------------------------------


def add_months(ts: datetime, months: int) -> datetime:
    month0 = ts.month - 1 + months
    year, month = ts.year + month0 // 12, month0 % 12 + 1
    day = min(ts.day, calendar.monthrange(year, month)[1])
    return ts.replace(year=year, month=month, day=day)


def split_months(series: MultivariateSeries, train: int = 12, val: int = 4, test: int = 4):
    """Chronological train/val/test split by civil-calendar months from the first timestamp."""
    start = series.timestamps[0]
    bounds = [add_months(start, train), add_months(start, train + val), add_months(start, train + val + test)]
    step = series.timestamps[1] - series.timestamps[0] if len(series) > 1 else timedelta(0)
    if series.timestamps[-1] + step < bounds[-1]:
        raise ConfigError(f"series ends {series.timestamps[-1]}, needs data up to {bounds[-1]} "
                          f"for a {train}/{val}/{test} month split")
    stamps = np.array(series.timestamps, dtype="datetime64[s]")
    cuts = [int(np.searchsorted(stamps, np.datetime64(b), side="left")) for b in bounds]
    return series.slice(0, cuts[0]), series.slice(cuts[0], cuts[1]), series.slice(cuts[1], cuts[2])


def split_fractions(series: MultivariateSeries, fractions=(0.6, 0.2, 0.2)):
    """Chronological split by row fractions (synthetic series without calendar meaning)."""
    t = len(series)
    a = int(round(fractions[0] * t))
    b = a + int(round(fractions[1] * t))
    c = min(t, b + int(round(fractions[2] * t)))
    return series.slice(0, a), series.slice(a, b), series.slice(b, c)


@dataclass(frozen=True)
class WindowSample:
    input: np.ndarray
    target: np.ndarray
    origin: int


@dataclass
class WindowSet:
    """Stacked windows: ``inputs`` (S, N, F), ``targets`` (S, N, s), ``origins`` (S,)."""

    inputs: np.ndarray
    targets: np.ndarray
    origins: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]

    def __getitem__(self, i) -> WindowSample:
        return WindowSample(self.inputs[i], self.targets[i], int(self.origins[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def windowize(series, horizon: int, stride: int = 1, target_columns: Optional[Sequence[int]] = None) -> WindowSet:
    """Slide an observed window of ``horizon`` steps followed by a target window of the same length."""
    values = series.values if isinstance(series, MultivariateSeries) else np.asarray(series, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    t = values.shape[0]
    if horizon < 1 or stride < 1:
        raise ConfigError("horizon and stride must be >= 1")
    if t < 2 * horizon:
        raise ConfigError(f"series of length {t} is too short for horizon {horizon}")
    origins = np.arange(0, t - 2 * horizon + 1, stride)
    cols = list(range(values.shape[1])) if target_columns is None else list(target_columns)
    offsets = np.arange(horizon)
    inputs = values[origins[:, None] + offsets]
    targets = values[origins[:, None] + horizon + offsets][..., cols]
    return WindowSet(inputs, targets, origins)


def persistence_forecast(inputs: np.ndarray, target_columns: Optional[Sequence[int]] = None) -> np.ndarray:
    """Repeat the last observed value over the whole horizon."""
    last = inputs[:, -1:, :]
    if target_columns is not None:
        last = last[..., list(target_columns)]
    return np.repeat(last, inputs.shape[1], axis=1)


# -- standardization -------------------------------------------------------------


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray
    passthrough: list = field(default_factory=list)

    @classmethod
    def fit(cls, train) -> "Standardizer":
        values = train.values if isinstance(train, MultivariateSeries) else np.asarray(train, dtype=np.float64)
        if values.shape[0] == 0:
            raise ConfigError("cannot standardize an empty train split")
        mean = values.mean(axis=0)
        scale = values.std(axis=0)
        constant = [int(j) for j in np.flatnonzero(scale == 0.0)]
        for j in constant:
            warnings.warn(f"feature {j} has zero variance on the train split; left unscaled", RuntimeWarning)
            mean[j], scale[j] = 0.0, 1.0
        return cls(mean, scale, constant)

    def transform(self, x):
        if isinstance(x, MultivariateSeries):
            return MultivariateSeries(x.timestamps, self.transform(x.values), list(x.columns), x.target_index)
        return (np.asarray(x) - self.mean) / self.scale

    def inverse(self, z):
        if isinstance(z, MultivariateSeries):
            return MultivariateSeries(z.timestamps, self.inverse(z.values), list(z.columns), z.target_index)
        return np.asarray(z) * self.scale + self.mean


def standardize(train):
    """Fit on the train split; returns ``(transform, inverse)``."""
    s = Standardizer.fit(train)
    return s.transform, s.inverse


def forecast_task(series: MultivariateSeries, horizon: int, splits=None, train_stride: int = 1,
                  scaler: Optional[Standardizer] = None):
    """Standardize on the train split and build windows (dense for train, non-overlapping for val/test).

    A previously fitted ``scaler`` (e.g. restored from a checkpoint) is used as is.
    """
    train, val, test = splits if splits is not None else split_months(series)
    scaler = scaler or Standardizer.fit(train)
    sets = []
    for part, stride in ((train, train_stride), (val, horizon), (test, horizon)):
        w = windowize(scaler.transform(part.values), horizon, stride)
        sets.append(Split(w.inputs, w.targets))
    return TaskData(*sets, kind="regression"), scaler


# -- synthetic tasks -------------------------------------------------------------

SINE_AMPLITUDES = (1.0, 0.6)
SINE_PERIODS = (20.0, 20.0 * math.sqrt(3.0))


def synth_sine(T: int, noise_sd: float = 0.0, seed: int = 0, horizon: int = 24) -> MultivariateSeries:
    """Two incommensurate sinusoids plus Gaussian noise, hourly, univariate."""
    if T < 4 * horizon:
        raise ConfigError(f"need T >= 4 * horizon, got T={T}, horizon={horizon}")
    if noise_sd < 0:
        raise ConfigError("noise_sd must be >= 0")
    rng = np.random.default_rng(seed)
    phases = rng.uniform(0.0, 2 * math.pi, len(SINE_PERIODS))
    t = np.arange(T, dtype=np.float64)
    x = sum(a * np.sin(2 * math.pi * t / p + ph) for a, p, ph in zip(SINE_AMPLITUDES, SINE_PERIODS, phases))
    x = x + noise_sd * rng.normal(size=T)
    start = datetime(2016, 7, 1)
    stamps = [start + timedelta(hours=int(i)) for i in range(T)]
    return MultivariateSeries(stamps, x[:, None], ["x"], 0)


def sine_persistence_mse(horizon: int, noise_sd: float = 0.0) -> float:
    """Long-run persistence MSE of :func:`synth_sine`, averaged over lead times 1..horizon.

    For a*sin(w t + p) the lag-h persistence error has mean square
    a^2 (1 - cos(w h)); cross terms of incommensurate frequencies average out.
    """
    h = np.arange(1, horizon + 1)
    mse = sum(a * a * (1.0 - np.cos(2 * math.pi * h / p)) for a, p in zip(SINE_AMPLITUDES, SINE_PERIODS))
    return float(np.mean(mse) + 2 * noise_sd**2)


BIDIR_ALPHABET = 2
BIDIR_LAG = 2


def bidir_labels(tokens: np.ndarray, lag: int = BIDIR_LAG) -> np.ndarray:
    """Label at k is ``x[k - lag] + x[k + lag]``; tokens outside the sequence count as 0."""
    padded = np.pad(tokens, [(0, 0), (lag, lag)])
    return padded[:, :-2 * lag] + padded[:, 2 * lag:]


def synth_bidir(N: int, count: int, seed: int = 0):
    """Sequence labeling that needs both past and future context.

    Returns one-hot inputs (count, N, 2) and integer labels (count, N) in {0, 1, 2}.
    """
    if N < 8:
        raise ConfigError(f"synth_bidir needs N >= 8, got {N}")
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, BIDIR_ALPHABET, size=(count, N))
    return np.eye(BIDIR_ALPHABET)[tokens], bidir_labels(tokens)


def causal_accuracy_bound(N: int, alphabet: int = BIDIR_ALPHABET, lag: int = BIDIR_LAG) -> float:
    """Best mean per-position accuracy of any predictor that sees only tokens up to position k.

    Enumerates every assignment of the two tokens the label depends on.
    """
    total = 0.0
    for k in range(N):
        past_visible = k - lag >= 0
        future_exists = k + lag < N
        groups = {}
        for past, future in itertools.product(range(alphabet), repeat=2):
            p = (past if past_visible else 0)
            f = (future if future_exists else 0)
            key = past if past_visible else None
            groups.setdefault(key, {}).setdefault(p + f, 0)
            groups[key][p + f] += 1
        hits = sum(max(counts.values()) for counts in groups.values())
        total += hits / alphabet**2
    return total / N


def bidir_task(N: int, n_train: int, n_val: int, n_test: int, seed: int = 0) -> TaskData:
    x, y = synth_bidir(N, n_train + n_val + n_test, seed)
    a, b = n_train, n_train + n_val
    return TaskData(Split(x[:a], y[:a]), Split(x[a:b], y[a:b]), Split(x[b:], y[b:]), kind="labeling")


# -- binary export ---------------------------------------------------------------


def export_windows(windows: WindowSet, path) -> Path:
    """Write ``u64 count, u64 N, u64 F`` then row-major little-endian float64 inputs."""
    path = Path(path)
    count, n, f = windows.inputs.shape
    with path.open("wb") as fh:
        fh.write(struct.pack("<3Q", count, n, f))
        fh.write(np.ascontiguousarray(windows.inputs, dtype="<f8").tobytes())
    return path


def read_windows(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 24:
        raise IngestionError(f"{path}: truncated window container")
    count, n, f = struct.unpack("<3Q", data[:24])
    expected = 24 + 8 * count * n * f
    if len(data) != expected:
        raise IngestionError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data[24:], dtype="<f8").reshape(count, n, f).copy()
