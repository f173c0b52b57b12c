"""Regression scores and error analysis.

Errors are signed as prediction minus truth. Theil's U is the U2 form: model
RMSE over the persistence forecast's RMSE on the same one-step horizon.
Prediction intervals are symmetric Gaussian bands whose width comes from the
standard deviation of held-out (validation) residuals.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

logger = logging.getLogger(__name__)

Z95 = 1.959964

# Table column layout used for reports and the ablation harness
REPORT_COLUMNS = ("MSE", "RMSE", "MAE", "R2", "ME", "SDE", "Median Error", "Max Error",
                  "Min Error", "MAD", "Theil's U", "95% Coverage")


def _pair(y, yhat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {len(y)} truths vs {len(yhat)} predictions")
    if len(y) == 0:
        raise ValueError("metrics of an empty series")
    return y, yhat


def basic_metrics(y, yhat) -> tuple[float, float, float, float]:
    """(MSE, RMSE, MAE, R^2); R^2 is NaN for a constant truth series."""
    y, yhat = _pair(y, yhat)
    err = yhat - y
    mse = float(np.mean(err * err))
    mae = float(np.mean(np.abs(err)))
    sst = float(np.sum((y - y.mean()) ** 2))
    if len(y) < 2 or sst == 0:
        logger.warning("R^2 undefined for a constant or single-point truth series")
        r2 = math.nan
    else:
        r2 = 1.0 - float(np.sum(err * err)) / sst
    return mse, math.sqrt(mse), mae, r2


def error_analysis(y, yhat) -> dict[str, float]:
    y, yhat = _pair(y, yhat)
    e = yhat - y
    med = float(np.median(e))
    return {"me": float(e.mean()), "sde": float(e.std()), "median_error": med,
            "max_error": float(e.max()), "min_error": float(e.min()),
            "mad": float(np.median(np.abs(e - med)))}


def theils_u(y, yhat) -> float:
    """U2: sqrt(sum (yhat[t+1]-y[t+1])^2) / sqrt(sum (y[t+1]-y[t])^2)."""
    y, yhat = _pair(y, yhat)
    if len(y) < 2:
        raise ValueError("Theil's U needs at least two observations")
    den = float(np.sum(np.diff(y) ** 2))
    if den == 0:
        logger.warning("Theil's U undefined: truth series is constant")
        return math.nan
    return math.sqrt(float(np.sum((yhat[1:] - y[1:]) ** 2)) / den)


@dataclass(frozen=True)
class IntervalModel:
    residual_sigma: float
    z: float = Z95

    def __post_init__(self):
        if not self.residual_sigma >= 0:
            raise ValueError(f"residual_sigma must be >= 0, got {self.residual_sigma}")

    @classmethod
    def fit(cls, residuals) -> "IntervalModel":
        r = np.asarray(residuals, dtype=np.float64)
        if len(r) == 0:
            raise ValueError("cannot fit an interval on no residuals")
        return cls(float(r.std()))

    @property
    def half_width(self) -> float:
        return self.z * self.residual_sigma

    def bounds(self, yhat) -> tuple[np.ndarray, np.ndarray]:
        yhat = np.asarray(yhat, dtype=np.float64)
        return yhat - self.half_width, yhat + self.half_width


def coverage_95(y, yhat, interval: IntervalModel) -> float:
    """Percent of points with ``|y - yhat| <= z sigma`` (boundary inclusive)."""
    y, yhat = _pair(y, yhat)
    return 100.0 * float(np.mean(np.abs(y - yhat) <= interval.half_width))


@dataclass
class EvalReport:
    mse: float
    rmse: float
    mae: float
    r2: float
    me: float
    sde: float
    median_error: float
    max_error: float
    min_error: float
    mad: float
    theils_u: float
    coverage_95: float

    def as_row(self) -> dict[str, float]:
        return dict(zip(REPORT_COLUMNS, (self.mse, self.rmse, self.mae, self.r2, self.me,
                                         self.sde, self.median_error, self.max_error,
                                         self.min_error, self.mad, self.theils_u,
                                         self.coverage_95)))

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    def to_text(self) -> str:
        row = self.as_row()
        width = max(len(k) for k in row)
        return "".join(f"{k.ljust(width)}  {v:.6f}\n" for k, v in row.items())


def evaluate(y, yhat, interval: IntervalModel) -> EvalReport:
    mse, rmse, mae, r2 = basic_metrics(y, yhat)
    err = error_analysis(y, yhat)
    return EvalReport(mse, rmse, mae, r2, theils_u=theils_u(y, yhat),
                      coverage_95=coverage_95(y, yhat, interval), **err)
