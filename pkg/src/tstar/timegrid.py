"""Time discretisation, demand aggregation and train/test splitting.

Every interval is half-open: interval ``t`` covers
``[start + t * resolution, start + (t + 1) * resolution)``, so a timestamp
that sits exactly on a boundary belongs to the later interval.

Timestamps are naive local times of a single service timezone with a fixed
UTC offset; daylight-saving transitions are not modelled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta
from typing import Iterable, Literal

import numpy as np

from .errors import ConfigError, DataError

Kind = Literal["pickup", "dropoff"]
KINDS: tuple[str, str] = ("pickup", "dropoff")
SUPPORTED_RESOLUTIONS = (15, 60)


@dataclass(frozen=True)
class TimeGrid:
    start: datetime
    resolution: int
    length: int

    def __post_init__(self):
        if self.resolution not in SUPPORTED_RESOLUTIONS:
            raise ConfigError(f"unsupported resolution {self.resolution} min; use 15 or 60")
        if self.length <= 0:
            raise ConfigError("grid length must be positive")
        if self.start.second or self.start.microsecond:
            raise ConfigError("grid start must have minute precision")

    @property
    def step(self) -> timedelta:
        return timedelta(minutes=self.resolution)

    @property
    def end(self) -> datetime:
        return self.start + self.length * self.step

    @property
    def per_hour(self) -> int:
        return 60 // self.resolution

    def interval_start(self, t: int) -> datetime:
        return self.start + t * self.step

    def index_of(self, ts: datetime) -> int | None:
        """Interval containing ``ts``, or None when it falls outside the grid."""
        offset = (ts - self.start) / self.step
        t = int(np.floor(offset))
        if 0 <= t < self.length:
            return t
        return None

    def indices_of(self, stamps: np.ndarray) -> np.ndarray:
        """Vectorised ``index_of`` over ``datetime64`` values; -1 marks outside."""
        base = np.datetime64(self.start, "s")
        secs = (stamps.astype("datetime64[s]") - base).astype(np.int64)
        t = np.floor_divide(secs, self.resolution * 60)
        t[(t < 0) | (t >= self.length)] = -1
        return t

    def timestamps(self) -> np.ndarray:
        base = np.datetime64(self.start, "m")
        return base + np.arange(self.length) * np.timedelta64(self.resolution, "m")

    def hour_of_day(self) -> np.ndarray:
        return self._minute_of_day() // 60

    def quarter_of_hour(self) -> np.ndarray:
        return (self._minute_of_day() % 60) // 15

    def day_of_week(self) -> np.ndarray:
        """Monday = 0 ... Sunday = 6."""
        days = self.timestamps().astype("datetime64[D]").astype(np.int64)
        # 1970-01-01 was a Thursday
        return (days + 3) % 7

    def dates(self) -> np.ndarray:
        return self.timestamps().astype("datetime64[D]")

    def _minute_of_day(self) -> np.ndarray:
        ts = self.timestamps()
        return (ts - ts.astype("datetime64[D]")).astype(np.int64)

    def hourly(self) -> "TimeGrid":
        """The hourly grid sharing this grid's start."""
        if self.resolution == 60:
            return self
        if self.length % self.per_hour:
            raise ConfigError("grid length is not a whole number of hours")
        return TimeGrid(self.start, 60, self.length // self.per_hour)

    def hour_index(self) -> np.ndarray:
        """Parent-hour index of each interval (``floor(q / 4)`` on a 15-min grid)."""
        return np.arange(self.length) // self.per_hour

    def slice(self, lo: int, hi: int) -> "TimeGrid":
        return TimeGrid(self.interval_start(lo), self.resolution, hi - lo)


def build_grid(start: datetime, resolution: int, length: int) -> TimeGrid:
    return TimeGrid(start, resolution, length)


@dataclass(frozen=True)
class DemandSeries:
    station: str
    grid: TimeGrid
    kind: str
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown demand kind {self.kind!r}")
        values = np.asarray(self.values)
        if values.shape != (self.grid.length,):
            raise DataError(f"series length {values.shape} does not match grid length {self.grid.length}")
        if values.size and (values.min() < 0 or not np.issubdtype(values.dtype, np.integer)):
            raise DataError("demand values must be non-negative integers")
        values = values.astype(np.int64, copy=True)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.grid.length


@dataclass(frozen=True)
class SplitSpec:
    train_end: int
    test_end: int

    def validate(self, length: int) -> None:
        if not 0 < self.train_end < self.test_end <= length:
            raise ConfigError(
                f"invalid split train_end={self.train_end}, test_end={self.test_end} for T={length}"
            )

    def scaled(self, factor: int) -> "SplitSpec":
        """Same split on a grid ``factor`` times finer (hourly -> quarter uses 4)."""
        return SplitSpec(self.train_end * factor, self.test_end * factor)

    def coarsened(self, factor: int) -> "SplitSpec":
        if self.train_end % factor or self.test_end % factor:
            raise ConfigError("split boundaries are not aligned with the coarser grid")
        return SplitSpec(self.train_end // factor, self.test_end // factor)


@dataclass
class AggregationResult:
    series: DemandSeries
    discarded: int


def _endpoint(trip, kind: str):
    if kind == "pickup":
        return trip.origin, trip.start_time
    return trip.destination, trip.end_time


def aggregate_trips(trips: Iterable, grid: TimeGrid, station: str, kind: str) -> AggregationResult:
    """Count trips whose pickup (origin) or drop-off (destination) is ``station``.

    Matching trips that fall outside the grid are dropped and tallied in
    ``discarded``.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown demand kind {kind!r}")
    counts = np.zeros(grid.length, dtype=np.int64)
    discarded = 0
    for trip in trips:
        where, when = _endpoint(trip, kind)
        if where != station:
            continue
        t = grid.index_of(when)
        if t is None:
            discarded += 1
        else:
            counts[t] += 1
    return AggregationResult(DemandSeries(station, grid, kind, counts), discarded)


def aggregate_all(trips, grid: TimeGrid, stations: list[str], kind: str) -> tuple[np.ndarray, int]:
    """Vectorised aggregation for many stations.

    Returns a ``(len(stations), grid.length)`` count matrix and the number of
    trips dropped because the relevant endpoint is unknown or off-grid.
    """
    if kind not in KINDS:
        raise ConfigError(f"unknown demand kind {kind!r}")
    row = {s: i for i, s in enumerate(stations)}
    counts = np.zeros((len(stations), grid.length), dtype=np.int64)
    if not trips:
        return counts, 0
    ends = [_endpoint(tr, kind) for tr in trips]
    rows = np.array([row.get(s, -1) for s, _ in ends], dtype=np.int64)
    stamps = np.array([w for _, w in ends], dtype="datetime64[s]")
    cols = grid.indices_of(stamps)
    ok = (rows >= 0) & (cols >= 0)
    np.add.at(counts, (rows[ok], cols[ok]), 1)
    return counts, int((~ok).sum())


def downsample_to_hourly(q_series: DemandSeries) -> DemandSeries:
    grid = q_series.grid
    if grid.resolution != 15:
        raise ConfigError("downsampling expects a 15-minute series")
    if grid.length % 4:
        raise ConfigError("15-minute series has a ragged tail (length not divisible by 4)")
    hourly = q_series.values.reshape(-1, 4).sum(axis=1)
    return DemandSeries(q_series.station, grid.hourly(), q_series.kind, hourly)


def to_hourly(counts: np.ndarray) -> np.ndarray:
    """Sum consecutive groups of four quarters along the last axis."""
    if counts.shape[-1] % 4:
        raise ConfigError("quarter count is not divisible by 4")
    return counts.reshape(*counts.shape[:-1], -1, 4).sum(axis=-1)


def split(series: DemandSeries, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Contiguous read-only train and test views of a series."""
    spec.validate(series.grid.length)
    values = series.values
    return values[: spec.train_end], values[spec.train_end : spec.test_end]
