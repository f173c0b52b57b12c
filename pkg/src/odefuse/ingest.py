"""Loading and cleaning raw series: parse, outlier fence, fills, scaling, split."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

MISSING_TOKENS = ["", "NaN", "nan", "NA", "Not Available"]


class IngestError(ValueError):
    pass


@dataclass
class SeriesTable:
    """Timestamp-indexed numeric columns with one designated target."""

    frame: pd.DataFrame
    target: str

    def __post_init__(self):
        idx = self.frame.index
        if not isinstance(idx, pd.DatetimeIndex):
            raise IngestError("SeriesTable needs a DatetimeIndex")
        if idx.has_duplicates:
            raise IngestError("duplicate timestamps in SeriesTable")
        if not idx.is_monotonic_increasing:
            raise IngestError("timestamps must be strictly increasing")
        if self.target not in self.frame.columns:
            raise IngestError(f"target column {self.target!r} not in table")

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def timestamps(self) -> pd.DatetimeIndex:
        return self.frame.index

    @property
    def y(self) -> np.ndarray:
        return self.frame[self.target].to_numpy(dtype=np.float64)

    def replace(self, frame: pd.DataFrame) -> "SeriesTable":
        return SeriesTable(frame, self.target)


def _parse_timestamps(raw: pd.Series) -> pd.Series:
    text = raw.astype(str).str.strip()
    yyyymm = text.str.fullmatch(r"\d{6}")
    if yyyymm.mean() > 0.5:
        # EIA style; month 13 (annual totals) fails to parse and is dropped
        return pd.to_datetime(text.where(yyyymm), format="%Y%m", errors="coerce")
    return pd.to_datetime(text, errors="coerce", format="ISO8601")


def _to_float(text: str) -> float:
    # python's float() is correctly rounded; pandas' fast parser is not always
    text = text.strip()
    if text in MISSING_TOKENS:
        return np.nan
    try:
        return float(text)
    except ValueError:
        return np.nan


def load_csv(path, timestamp_column: str, target_column: str,
             frequency_hint: str | None = None, delimiter: str = ",",
             columns: list[str] | None = None) -> SeriesTable:
    """Read a CSV into a :class:`SeriesTable`.

    Rows whose timestamp does not parse or whose target is missing or
    non-numeric are dropped. ``columns`` selects extra numeric covariates;
    by default every other numeric-looking column is kept.
    """
    path = Path(path)
    if not path.exists():
        raise IngestError(f"input file not found: {path}")
    raw = pd.read_csv(path, sep=delimiter, dtype=str, keep_default_na=False)
    for col in (timestamp_column, target_column):
        if col not in raw.columns:
            raise IngestError(f"{path}: column {col!r} not found (have {list(raw.columns)})")
    ts = _parse_timestamps(raw[timestamp_column])
    keep = [target_column] + [c for c in (columns or raw.columns)
                              if c not in (timestamp_column, target_column)]
    values = {}
    for col in keep:
        if col not in raw.columns:
            raise IngestError(f"{path}: column {col!r} not found")
        num = raw[col].map(_to_float)
        if col == target_column or columns is not None or num.notna().mean() > 0.5:
            values[col] = num
    frame = pd.DataFrame(values)
    frame.index = pd.DatetimeIndex(ts, name="timestamp")
    ok = frame.index.notna() & frame[target_column].notna().to_numpy()
    dropped = int((~ok).sum())
    if dropped:
        logger.info("%s: dropped %d rows with bad timestamp or target", path.name, dropped)
    frame = frame[ok].sort_index()
    if frame.empty:
        raise IngestError(f"{path}: no parseable rows")
    if frame.index.has_duplicates:
        dup = frame.index[frame.index.duplicated()][0]
        raise IngestError(f"{path}: duplicate timestamp {dup}")
    if frequency_hint:
        frame.attrs["frequency_hint"] = frequency_hint
    return SeriesTable(frame.astype(np.float64), target_column)


def quantile_linear(values, q: float) -> float:
    """Quantile by linear interpolation between order statistics."""
    return float(np.quantile(np.asarray(values, dtype=np.float64), q, method="linear"))


def iqr_filter(table: SeriesTable, column: str | None = None, k: float = 1.5) -> SeriesTable:
    """Drop rows whose ``column`` value lies outside ``[Q1 - k IQR, Q3 + k IQR]``.

    The fence is recomputed on the surviving rows until nothing more is removed,
    so the result is a fixed point and a second call is a no-op. A pass that
    would leave fewer than 4 rows is not applied.
    """
    column = column or table.target
    if len(table) < 4:
        raise IngestError(f"iqr_filter needs at least 4 rows, got {len(table)}")
    removed = 0
    while True:
        v = table.frame[column].to_numpy(dtype=np.float64)
        q1, q3 = quantile_linear(v, 0.25), quantile_linear(v, 0.75)
        iqr = q3 - q1
        if iqr == 0:
            if removed == 0:
                logger.warning("iqr_filter: IQR of %r is zero, leaving table unchanged", column)
            break
        inside = (v >= q1 - k * iqr) & (v <= q3 + k * iqr)
        if inside.all() or inside.sum() < 4:
            break
        removed += int((~inside).sum())
        table = table.replace(table.frame[inside])
    if removed:
        logger.info("iqr_filter: removed %d outlier rows from %r", removed, column)
    return table


def fill_missing(table: SeriesTable) -> SeriesTable:
    """Forward fill, then backward fill, every column."""
    empty = [c for c in table.frame.columns if table.frame[c].isna().all()]
    if empty:
        raise IngestError(f"column {empty[0]!r} has no values to fill from")
    return table.replace(table.frame.ffill().bfill())


def resample_monthly(table: SeriesTable, aggregation: str = "mean") -> SeriesTable:
    """One row per calendar month (month-start stamps); empty months are NaN."""
    if table.frame.empty:
        return table
    frame = table.frame.resample("MS").agg(aggregation)
    frame.index.name = "timestamp"
    return table.replace(frame)


@dataclass
class ScalerState:
    names: list[str]
    mean: np.ndarray
    std: np.ndarray
    n_fit: int

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return (X - self.mean) / self.std

    def inverse(self, Z) -> np.ndarray:
        return np.asarray(Z, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return {"names": list(self.names), "mean": self.mean.tolist(),
                "std": self.std.tolist(), "n_fit": self.n_fit}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerState":
        return cls(list(d["names"]), np.asarray(d["mean"], dtype=np.float64),
                   np.asarray(d["std"], dtype=np.float64), int(d["n_fit"]))


def fit_scaler(X, names) -> ScalerState:
    """Column mean and population std; constant columns are rejected."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    names = list(names)
    if np.isnan(X).any():
        raise IngestError("cannot standardize data with missing values")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    for name, s, col in zip(names, std, X.T):
        if s == 0 or np.ptp(col) == 0:
            raise IngestError(f"column {name!r} is constant on the fitting split")
    return ScalerState(names, mean, std, len(X))


def standardize(fm, state: ScalerState | None = None):
    """Standardize a FeatureMatrix's X, fitting a scaler unless one is given.

    Returns ``(scaled FeatureMatrix, ScalerState)``.
    """
    state = state or fit_scaler(fm.X, fm.names)
    if list(state.names) != list(fm.names):
        raise IngestError("scaler was fitted on different feature names")
    return fm.with_X(state.transform(fm.X)), state


def inverse_target(y_scaled, state: ScalerState) -> np.ndarray:
    return np.asarray(y_scaled, dtype=np.float64) * state.std[0] + state.mean[0]


def split_point(n: int, train_fraction: float = 0.8) -> int:
    if n < 5:
        raise IngestError(f"need at least 5 rows to split, got {n}")
    cut = int(np.floor(train_fraction * n))
    if cut < 1 or cut >= n:
        raise IngestError(f"train fraction {train_fraction} leaves an empty split for n={n}")
    return cut


def chrono_split(table, train_fraction: float = 0.8):
    """First ``floor(f n)`` rows train, the rest test; never shuffled."""
    cut = split_point(len(table), train_fraction)
    if isinstance(table, SeriesTable):
        return table.replace(table.frame.iloc[:cut]), table.replace(table.frame.iloc[cut:])
    return table.rows(slice(0, cut)), table.rows(slice(cut, None))
