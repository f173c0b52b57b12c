"""Deterministic synthetic series used by the examples, tests and CLI demo."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd

BUNDLED_MONTHLY = "synthetic_monthly.csv"


def synthetic_monthly(n: int = 600, seed: int = 2024, period: float = 12.0,
                      slope: float = 0.002, noise: float = 0.05,
                      start: str = "1973-01") -> pd.DataFrame:
    """EIA-style frame (``YYYYMM``, ``Value``): sinusoid + linear trend + noise."""
    rng = np.random.default_rng(seed)
    t = np.arange(n)
    value = np.sin(2 * np.pi * t / period) + slope * t + rng.normal(0.0, noise, n)
    months = pd.period_range(start, periods=n, freq="M")
    return pd.DataFrame({"YYYYMM": months.strftime("%Y%m"), "Value": value})


def synthetic_hourly(n: int = 24 * 400, seed: int = 2016,
                     start: str = "2016-07-01 00:00") -> pd.DataFrame:
    """ETT-style frame: ``date``, six load covariates and oil temperature ``OT``."""
    rng = np.random.default_rng(seed)
    t = np.arange(n)
    daily = np.sin(2 * np.pi * t / 24)
    weekly = np.sin(2 * np.pi * t / (24 * 7))
    loads = {}
    for i, name in enumerate(("HUFL", "HULL", "MUFL", "MULL", "LUFL", "LULL")):
        phase = 0.3 * i
        loads[name] = (2.0 + np.sin(2 * np.pi * t / 24 + phase) + 0.3 * weekly
                       + rng.normal(0.0, 0.2, n))
    drift = np.cumsum(rng.normal(0.0, 0.02, n))
    ot = 10.0 + 2.0 * daily + 0.5 * loads["HUFL"] + drift + rng.normal(0.0, 0.1, n)
    frame = pd.DataFrame({"date": pd.date_range(start, periods=n, freq="h")
                          .strftime("%Y-%m-%d %H:%M:%S")})
    for name, v in loads.items():
        frame[name] = v
    frame["OT"] = ot
    return frame


def write_csv(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    frame.to_csv(path, index=False, lineterminator="\n")
    return path


def bundled_monthly_path() -> Path:
    """Path of the packaged 600-month synthetic series."""
    return Path(str(resources.files("odefuse") / "data" / BUNDLED_MONTHLY))
