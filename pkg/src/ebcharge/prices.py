"""Hourly electricity-price ingestion and per-step price windows.

Price files are plain comma-separated text with the header
``timestamp,price_usd_per_kwh`` and one chronological row per hour.
Hourly values are expanded to the simulation step by zero-order hold.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from datetime import datetime, timedelta

import numpy as np

HEADER = ("timestamp", "price_usd_per_kwh")


class PriceDataError(ValueError):
    """Malformed, gapped or out-of-range price data."""


@dataclass(frozen=True)
class PriceSeries:
    per_step_prices: np.ndarray
    steps_per_hour: int
    origin: datetime

    def __post_init__(self):
        arr = np.asarray(self.per_step_prices, dtype=float)
        if arr.ndim != 1 or arr.size == 0:
            raise PriceDataError("price series must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(arr)):
            raise PriceDataError("price series contains non-finite values")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "per_step_prices", arr)

    def __len__(self):
        return self.per_step_prices.size

    @property
    def steps_per_day(self) -> int:
        return 24 * self.steps_per_hour

    @property
    def n_days(self) -> int:
        return len(self) // self.steps_per_day

    def price(self, t: int) -> float:
        # past the end of the trace the last price is held
        n = len(self)
        if t < 0:
            raise PriceDataError(f"negative step index {t}")
        return float(self.per_step_prices[t if t < n else n - 1])

    def hourly(self) -> np.ndarray:
        """Down-sample back to one value per hour (first step of each hour)."""
        return self.per_step_prices[:: self.steps_per_hour].copy()


def _parse_rows(path):
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PriceDataError(f"{path}: empty price file") from None
        if tuple(h.strip() for h in header) != HEADER:
            raise PriceDataError(f"{path}: bad header {header!r}, expected {','.join(HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise PriceDataError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                ts = datetime.fromisoformat(row[0].strip())
                value = float(row[1])
            except ValueError as exc:
                raise PriceDataError(f"{path}:{lineno}: malformed row {row!r} ({exc})") from None
            if not np.isfinite(value):
                raise PriceDataError(f"{path}:{lineno}: non-finite price {row[1]!r}")
            rows.append((ts, value, f"{path}:{lineno}"))
    return rows


def _check_hourly(rows):
    for (prev, _, _), (ts, _, where) in zip(rows, rows[1:]):
        delta = ts - prev
        if delta == timedelta(0):
            raise PriceDataError(f"{where}: duplicate timestamp {ts.isoformat()}")
        if delta < timedelta(0):
            raise PriceDataError(f"{where}: timestamp {ts.isoformat()} is out of order")
        if delta != timedelta(hours=1):
            raise PriceDataError(f"{where}: gap before {ts.isoformat()} (missing hours)")


def load_prices(path, dt_minutes: int = 10) -> PriceSeries:
    """Read an hourly price file (or a directory of daily files) into a per-step series."""
    if 60 % dt_minutes:
        raise PriceDataError(f"dt_minutes={dt_minutes} does not divide an hour")
    steps_per_hour = 60 // dt_minutes
    if os.path.isdir(path):
        files = sorted(
            os.path.join(path, f) for f in os.listdir(path) if f.endswith(".csv")
        )
        if not files:
            raise PriceDataError(f"{path}: no .csv files in directory")
        rows = [r for f in files for r in _parse_rows(f)]
        rows.sort(key=lambda r: r[0])
    else:
        rows = _parse_rows(path)
    if not rows:
        raise PriceDataError(f"{path}: no price rows")
    _check_hourly(rows)
    hourly = np.array([v for _, v, _ in rows])
    return PriceSeries(np.repeat(hourly, steps_per_hour), steps_per_hour, rows[0][0])


def series_from_hourly(values, dt_minutes: int = 10, origin: datetime | None = None) -> PriceSeries:
    steps_per_hour = 60 // dt_minutes
    origin = origin or datetime(2023, 1, 1)
    return PriceSeries(np.repeat(np.asarray(values, float), steps_per_hour), steps_per_hour, origin)


def window(series: PriceSeries, t: int, w_p: int, pad: bool = True) -> tuple:
    """Prices ``(P[t-w_p], ..., P[t])``, oldest first.

    With ``pad`` the steps before the series origin repeat the first price.
    """
    if t - w_p < 0 and not pad:
        raise PriceDataError(f"window at t={t} needs {w_p} steps of history")
    if t < 0:
        raise PriceDataError(f"negative step index {t}")
    return tuple(series.price(max(i, 0)) for i in range(t - w_p, t + 1))


def split_train_test(series: PriceSeries, boundary_day: int):
    """Split at a whole-day boundary into disjoint, contiguous train/test series."""
    if not 0 < boundary_day < series.n_days:
        raise PriceDataError(
            f"boundary day {boundary_day} outside (0, {series.n_days}); both halves must be non-empty"
        )
    cut = boundary_day * series.steps_per_day
    p = series.per_step_prices
    train = PriceSeries(p[:cut], series.steps_per_hour, series.origin)
    test = PriceSeries(p[cut:], series.steps_per_hour, series.origin + timedelta(days=boundary_day))
    return train, test


def sample_days(series: PriceSeries, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly sampled day indices for training episodes."""
    return rng.integers(0, series.n_days, size=n)


# Typical-day hourly shape ($/kWh), maximum in the 17:00 hour.
DAILY_SHAPE = np.array([
    0.0190, 0.0182, 0.0178, 0.0176, 0.0180, 0.0196,  # 00-05
    0.0232, 0.0275, 0.0290, 0.0268, 0.0245, 0.0236,  # 06-11
    0.0228, 0.0214, 0.0198, 0.0192, 0.0262, 0.03921,  # 12-17
    0.0340, 0.0300, 0.0276, 0.0252, 0.0226, 0.0205,  # 18-23
])


def synthetic_hourly_prices(n_days: int, seed: int = 0, day_sigma: float = 0.08,
                            hour_sigma: float = 0.03) -> np.ndarray:
    """Hourly prices: the typical-day shape times a per-day level and per-hour noise."""
    rng = np.random.default_rng(seed)
    day_level = np.exp(rng.normal(0.0, day_sigma, size=(n_days, 1)))
    noise = np.exp(rng.normal(0.0, hour_sigma, size=(n_days, 24)))
    return np.round(DAILY_SHAPE[None, :] * day_level * noise, 5).ravel()


def write_price_file(path, hourly, start: datetime | None = None) -> None:
    start = start or datetime(2023, 1, 1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for i, v in enumerate(hourly):
            w.writerow([(start + timedelta(hours=i)).isoformat(), f"{float(v):.5f}"])
