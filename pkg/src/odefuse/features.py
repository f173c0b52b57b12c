"""Engineered feature columns and windowed datasets.

Rolling and expanding statistics use population (1/w) moments with windows
ending at, and including, row t. A row's features therefore use observations
up to t, and its regression target is the value ``horizon`` steps later.
Leading rows with undefined lags/windows are filled forward, then backward.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .ingest import SeriesTable

PROFILES = ("EIA", "ETT", "WINDOWED")
EIA_LAGS = (1, 2, 3, 4, 5, 6)
ETT_LAGS = (1, 2, 3, 5, 7, 14, 21, 28)
ETT_WINDOWS = (5, 10, 20)
ETT_ROLLING = ("mean", "std", "min", "max", "var", "skew")
EIA_ROLLING = ("mean", "std", "median")
ETT_COVARIATES = ("HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL")
WINDOW_LENGTHS = (96, 120, 336, 720)
CYCLES = {"hour": 24, "day": 31, "month": 12}


@dataclass
class FeatureMatrix:
    names: list[str]
    X: np.ndarray
    y: np.ndarray
    profile: str
    timestamps: pd.DatetimeIndex
    target_timestamps: pd.DatetimeIndex
    target_name: str = "target"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape[1] != len(self.names):
            raise ValueError(f"X shape {self.X.shape} does not match {len(self.names)} names")
        n = len(self.X)
        if not (len(self.y) == len(self.timestamps) == len(self.target_timestamps) == n):
            raise ValueError("X, y and timestamps must have the same number of rows")

    def __len__(self) -> int:
        return len(self.X)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def rows(self, sl) -> "FeatureMatrix":
        return FeatureMatrix(list(self.names), self.X[sl], self.y[sl], self.profile,
                             self.timestamps[sl], self.target_timestamps[sl], self.target_name)

    def with_X(self, X) -> "FeatureMatrix":
        return FeatureMatrix(list(self.names), X, self.y.copy(), self.profile,
                             self.timestamps, self.target_timestamps, self.target_name)

    def with_y(self, y) -> "FeatureMatrix":
        return FeatureMatrix(list(self.names), self.X.copy(), y, self.profile,
                             self.timestamps, self.target_timestamps, self.target_name)

    def select(self, names: Sequence[str]) -> "FeatureMatrix":
        missing = [n for n in names if n not in self.names]
        if missing:
            raise KeyError(f"features not present: {missing}")
        idx = [self.names.index(n) for n in names]
        return FeatureMatrix(list(names), self.X[:, idx], self.y.copy(), self.profile,
                             self.timestamps, self.target_timestamps, self.target_name)

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame(self.X, columns=self.names)
        df.insert(0, "target_timestamp", self.target_timestamps.strftime("%Y-%m-%dT%H:%M:%S"))
        df.insert(0, "timestamp", self.timestamps.strftime("%Y-%m-%dT%H:%M:%S"))
        df["__target__"] = self.y
        return df

    def to_csv(self, path) -> None:
        # default float formatting is repr, which round-trips exactly
        self.to_frame().to_csv(path, index=False, lineterminator="\n")

    @classmethod
    def read_csv(cls, path, profile: str, target_name: str = "target") -> "FeatureMatrix":
        df = pd.read_csv(path, dtype={"timestamp": str, "target_timestamp": str},
                         float_precision="round_trip")
        names = [c for c in df.columns if c not in ("timestamp", "target_timestamp", "__target__")]
        return cls(names, df[names].to_numpy(dtype=np.float64),
                   df["__target__"].to_numpy(dtype=np.float64), profile,
                   pd.DatetimeIndex(pd.to_datetime(df["timestamp"])),
                   pd.DatetimeIndex(pd.to_datetime(df["target_timestamp"])), target_name)


@dataclass(frozen=True)
class WindowSpec:
    length: int = 96
    horizon: int = 1

    def __post_init__(self):
        if self.length < 1:
            raise ValueError(f"window length must be >= 1, got {self.length}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")


def _fill(values: np.ndarray) -> np.ndarray:
    return pd.Series(values).ffill().bfill().to_numpy(dtype=np.float64)


# -- calendar ---------------------------------------------------------------


def temporal_features(timestamps, profile: str) -> pd.DataFrame:
    """Calendar columns; EIA gives 3, ETT gives 8 (Monday = 0)."""
    ts = pd.DatetimeIndex(timestamps)
    cols = {}
    if profile == "EIA":
        cols["month"] = ts.month
        cols["quarter"] = ts.quarter
        cols["day_of_year"] = ts.dayofyear
    elif profile == "ETT":
        cols["hour"] = ts.hour
        cols["day"] = ts.day
        cols["day_of_week"] = ts.dayofweek
        cols["month"] = ts.month
        cols["quarter"] = ts.quarter
        cols["day_of_year"] = ts.dayofyear
        cols["week_of_year"] = ts.isocalendar().week.to_numpy()
        cols["is_weekend"] = (ts.dayofweek >= 5).astype(int)
    else:
        raise ValueError(f"temporal features are defined for EIA and ETT, not {profile!r}")
    return pd.DataFrame({k: np.asarray(v, dtype=np.float64) for k, v in cols.items()})


def cyclical_encode(value, period: float) -> tuple[np.ndarray, np.ndarray]:
    if not period > 0:
        raise ValueError(f"period must be positive, got {period}")
    angle = 2.0 * np.pi * np.asarray(value, dtype=np.float64) / period
    return np.sin(angle), np.cos(angle)


# -- target-derived columns -------------------------------------------------


def lag_features(y, lags: Iterable[int], prefix: str = "y") -> pd.DataFrame:
    """Column ``{prefix}_lag_k`` holds ``y[t-k]``; leading gaps are filled."""
    y = np.asarray(y, dtype=np.float64)
    lags = list(lags)
    for k in lags:
        if k < 1:
            raise ValueError(f"lags must be >= 1, got {k}")
        if k >= len(y):
            raise ValueError(f"lag {k} needs more than {len(y)} observations")
    out = {}
    for k in lags:
        col = np.full(len(y), np.nan)
        col[k:] = y[:-k]
        out[f"{prefix}_lag_{k}"] = _fill(col)
    return pd.DataFrame(out)


def _window_stat(windows: np.ndarray, stat: str) -> np.ndarray:
    if stat in ("min", "max", "median"):
        return getattr(np, stat)(windows, axis=1)
    mu = windows.mean(axis=1)
    if stat == "mean":
        return mu
    dev = windows - mu[:, None]
    var = (dev * dev).mean(axis=1)
    flat = np.ptp(windows, axis=1) == 0
    var[flat] = 0.0
    if stat == "var":
        return var
    if stat == "std":
        return np.sqrt(var)
    if stat == "skew":
        out = np.zeros(len(windows))
        ok = ~flat & (var > 0)
        out[ok] = (dev[ok] ** 3).mean(axis=1) / var[ok] ** 1.5
        return out
    raise ValueError(f"unknown rolling statistic {stat!r}")


def rolling_stats(y, window: int, stats: Iterable[str], prefix: str = "y") -> pd.DataFrame:
    """Trailing-window statistics named ``{prefix}_rolling_{stat}_{window}``."""
    y = np.asarray(y, dtype=np.float64)
    stats = list(stats)
    if window > len(y):
        raise ValueError(f"window {window} longer than series ({len(y)})")
    if window < 2 and set(stats) & {"std", "var", "skew"}:
        raise ValueError("std/var/skew need a window of at least 2")
    windows = np.lib.stride_tricks.sliding_window_view(y, window)
    out = {}
    for stat in stats:
        col = np.full(len(y), np.nan)
        col[window - 1:] = _window_stat(windows, stat)
        out[f"{prefix}_rolling_{stat}_{window}"] = _fill(col)
    return pd.DataFrame(out)


def expanding_stats(y, prefix: str = "y") -> pd.DataFrame:
    """Mean, population std, min and max over ``y[0..t]``."""
    y = np.asarray(y, dtype=np.float64)
    if len(y) < 1:
        raise ValueError("expanding statistics need at least one observation")
    count = np.arange(1, len(y) + 1)
    shifted = y - y[0]
    s1 = np.cumsum(shifted)
    s2 = np.cumsum(shifted * shifted)
    mean_shift = s1 / count
    var = np.maximum(s2 / count - mean_shift ** 2, 0.0)
    return pd.DataFrame({
        f"{prefix}_expanding_mean": mean_shift + y[0],
        f"{prefix}_expanding_std": np.sqrt(var),
        f"{prefix}_expanding_min": np.minimum.accumulate(y),
        f"{prefix}_expanding_max": np.maximum.accumulate(y),
    })


# -- manifests and assembly ---------------------------------------------------


def eia_manifest(target: str) -> list[str]:
    return (["month", "quarter", "day_of_year"]
            + [f"{target}_lag_{k}" for k in EIA_LAGS]
            + [f"{target}_rolling_{s}_3" for s in EIA_ROLLING]
            + ["fourier_sin", "fourier_cos"])


def ett_manifest(target: str, covariates: Sequence[str] = ETT_COVARIATES) -> list[str]:
    names = ["hour", "day", "day_of_week", "month", "quarter", "day_of_year",
             "week_of_year", "is_weekend"]
    names += [f"{c}_{t}" for c in CYCLES for t in ("sin", "cos")]
    names += [f"{target}_lag_{k}" for k in ETT_LAGS]
    names += [f"{target}_rolling_{s}_{w}" for w in ETT_WINDOWS for s in ETT_ROLLING]
    names += [f"{target}_expanding_{s}" for s in ("mean", "std", "min", "max")]
    names += list(covariates)
    names += [f"{target}_diff"]
    return names


def engineer_columns(table: SeriesTable, profile: str,
                     covariates: Sequence[str] = ETT_COVARIATES) -> pd.DataFrame:
    """All engineered columns for ``table``, one row per observation."""
    y = table.y
    t = table.target
    ts = table.timestamps
    if profile == "EIA":
        parts = [temporal_features(ts, "EIA"),
                 lag_features(y, EIA_LAGS, t),
                 rolling_stats(y, 3, EIA_ROLLING, t)]
        s, c = cyclical_encode(ts.month, 12)
        parts.append(pd.DataFrame({"fourier_sin": s, "fourier_cos": c}))
        names = eia_manifest(t)
    elif profile == "ETT":
        missing = [c for c in covariates if c not in table.frame.columns]
        if missing:
            raise ValueError(f"ETT profile needs covariate columns {missing}")
        cal = temporal_features(ts, "ETT")
        cyc = {}
        for unit, period in CYCLES.items():
            cyc[f"{unit}_sin"], cyc[f"{unit}_cos"] = cyclical_encode(cal[unit], period)
        parts = [cal, pd.DataFrame(cyc), lag_features(y, ETT_LAGS, t)]
        parts += [rolling_stats(y, w, ETT_ROLLING, t) for w in ETT_WINDOWS]
        parts.append(expanding_stats(y, t))
        cov = {c: _fill(table.frame[c].to_numpy(dtype=np.float64)) for c in covariates}
        diff = np.full(len(y), np.nan)
        diff[1:] = np.diff(y)
        cov[f"{t}_diff"] = _fill(diff)
        parts.append(pd.DataFrame(cov))
        names = ett_manifest(t, covariates)
    else:
        raise ValueError(f"engineered features are defined for EIA and ETT, not {profile!r}")
    frame = pd.concat(parts, axis=1)
    frame = frame[names]
    frame.index = ts
    return frame


def build_features(table: SeriesTable, profile: str, horizon: int = 1,
                   covariates: Sequence[str] = ETT_COVARIATES) -> FeatureMatrix:
    """Engineered design matrix; row t predicts ``y[t + horizon]``."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    frame = engineer_columns(table, profile, covariates)
    n = len(frame) - horizon
    if n < 1:
        raise ValueError(f"series of length {len(frame)} too short for horizon {horizon}")
    X = frame.to_numpy(dtype=np.float64)[:n]
    if np.isnan(X).any():
        raise ValueError("engineered features still contain missing values")
    return FeatureMatrix(list(frame.columns), X, table.y[horizon:], profile,
                         table.timestamps[:n], table.timestamps[horizon:], table.target)


def build_windowed(y, spec: WindowSpec, timestamps=None, target_name: str = "target") -> FeatureMatrix:
    """Row i holds ``y[i : i+L]`` and targets ``y[i + L + horizon - 1]``."""
    y = np.asarray(y, dtype=np.float64)
    L, hz = spec.length, spec.horizon
    n = len(y)
    if n <= L + hz:
        raise ValueError(f"series of length {n} too short for window {L} + horizon {hz}")
    rows = n - L - hz + 1
    X = np.lib.stride_tricks.sliding_window_view(y, L)[:rows].copy()
    target_idx = np.arange(rows) + L + hz - 1
    if timestamps is None:
        timestamps = pd.date_range("2000-01-01", periods=n, freq="h")
    ts = pd.DatetimeIndex(timestamps)
    names = [f"{target_name}_t-{L - j}" for j in range(L)]
    return FeatureMatrix(names, X, y[target_idx], "WINDOWED",
                         ts[np.arange(rows) + L - 1], ts[target_idx], target_name)


def write_manifest(path, names: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names))


def read_manifest(path) -> list[str]:
    return [line for line in Path(path).read_text().splitlines() if line]
