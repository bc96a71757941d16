"""Contextual inputs for both stages.

Channels are grouped as static (per station), global (per interval, shared
by all stations) and local (per station and interval). Every statistic used
here, seasonal profiles and normalisation alike, is computed on the
training split only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError
from .ingest import ProximityLink, StationMeta
from .timegrid import SplitSpec, TimeGrid

WEATHER_NAMES = ("temperature", "precipitation", "wind_speed")


# ---------------------------------------------------------------------------
# seasonal profiles


@dataclass
class SeasonalProfile:
    """Training-split means keyed by (day of week, hour, quarter).

    ``means`` has shape ``(n_series, 7, 24, Q)`` with ``Q = 4`` on a 15-min
    grid and ``Q = 1`` on an hourly grid. Keys never seen in training carry
    ``missing = True`` and resolve through the fallback chain
    (dow, hour, quarter) -> (hour, quarter) -> global mean.
    """

    means: np.ndarray
    counts: np.ndarray
    hour_means: np.ndarray
    global_mean: np.ndarray
    resolution: int

    @property
    def missing(self) -> np.ndarray:
        return self.counts == 0

    def lookup(self, dow: int, hour: int, quarter: int = 0) -> np.ndarray:
        """Profile value for one key, one entry per series."""
        q = quarter if self.resolution == 15 else 0
        if self.counts[dow, hour, q] > 0:
            return self.means[:, dow, hour, q]
        hm = self.hour_means[:, hour, q]
        return np.where(np.isnan(hm), self.global_mean, hm)

    def resolved(self) -> np.ndarray:
        """``means`` with every missing key replaced by its fallback value."""
        hm = np.where(np.isnan(self.hour_means), self.global_mean[:, None, None], self.hour_means)
        out = np.where(self.missing[None], hm[:, None, :, :], self.means)
        return out

    def expected(self, grid: TimeGrid) -> np.ndarray:
        """Profile value at every interval of ``grid``: shape ``(n_series, T)``."""
        if grid.resolution != self.resolution:
            raise ConfigError("profile and grid resolutions differ")
        q = grid.quarter_of_hour() if self.resolution == 15 else np.zeros(grid.length, dtype=np.int64)
        return self.resolved()[:, grid.day_of_week(), grid.hour_of_day(), q]


def seasonal_profile(values: np.ndarray, grid: TimeGrid, split: SplitSpec) -> SeasonalProfile:
    """Mean of ``values`` per seasonal key over intervals ``< split.train_end``."""
    values = np.asarray(values, dtype=np.float64)
    values = np.atleast_2d(values)
    if values.shape[1] != grid.length:
        raise ConfigError("values do not match the grid length")
    if split.train_end <= 0:
        raise ConfigError("training split is empty")
    n = split.train_end
    Q = 4 if grid.resolution == 15 else 1
    dow = grid.day_of_week()[:n]
    hour = grid.hour_of_day()[:n]
    q = grid.quarter_of_hour()[:n] if Q == 4 else np.zeros(n, dtype=np.int64)
    key = (dow * 24 + hour) * Q + q
    counts = np.bincount(key, minlength=7 * 24 * Q).astype(np.float64)
    train = values[:, :n]
    sums = np.stack([np.bincount(key, weights=row, minlength=7 * 24 * Q) for row in train])
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, sums / np.where(counts > 0, counts, 1), 0.0)
    hkey = hour * Q + q
    hcounts = np.bincount(hkey, minlength=24 * Q).astype(np.float64)
    hsums = np.stack([np.bincount(hkey, weights=row, minlength=24 * Q) for row in train])
    with np.errstate(invalid="ignore", divide="ignore"):
        hmeans = np.where(hcounts > 0, hsums / np.where(hcounts > 0, hcounts, 1), np.nan)
    return SeasonalProfile(
        means=means.reshape(-1, 7, 24, Q),
        counts=counts.reshape(7, 24, Q).astype(np.int64),
        hour_means=hmeans.reshape(-1, 24, Q),
        global_mean=train.mean(axis=1),
        resolution=grid.resolution,
    )


# ---------------------------------------------------------------------------
# metro deviations


@dataclass(frozen=True)
class MetroDeviation:
    bike_station: str
    interval: int
    delta_in: float
    delta_out: float


def metro_deviation(check_ins: np.ndarray, check_outs: np.ndarray, metro_ids: list[str], link: ProximityLink,
                    profile_in: SeasonalProfile, profile_out: SeasonalProfile, grid: TimeGrid,
                    interval: int) -> MetroDeviation:
    """Summed (observed - profile) metro flow over the stations linked to one bike station."""
    dev_in, dev_out = metro_deviation_matrix(check_ins, check_outs, metro_ids, [link], profile_in, profile_out, grid)
    return MetroDeviation(link.bike_station, interval, float(dev_in[0, interval]), float(dev_out[0, interval]))


def metro_deviation_matrix(check_ins, check_outs, metro_ids, links: list[ProximityLink], profile_in: SeasonalProfile,
                           profile_out: SeasonalProfile, grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
    """Deviations for many bike stations: two ``(len(links), T)`` arrays.

    Unlinked stations get all-zero rows.
    """
    res_in = np.asarray(check_ins, dtype=np.float64) - profile_in.expected(grid)
    res_out = np.asarray(check_outs, dtype=np.float64) - profile_out.expected(grid)
    row = {m: i for i, m in enumerate(metro_ids)}
    dev_in = np.zeros((len(links), grid.length))
    dev_out = np.zeros((len(links), grid.length))
    for b, link in enumerate(links):
        rows = sorted(row[m] for m in link.metro_stations if m in row)
        if rows:
            dev_in[b] = res_in[rows].sum(axis=0)
            dev_out[b] = res_out[rows].sum(axis=0)
    return dev_in, dev_out


# ---------------------------------------------------------------------------
# frames and normalisation


@dataclass
class NormStats:
    mean: dict[str, float]
    std: dict[str, float]
    degenerate: tuple[str, ...] = ()

    def to_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        names = sorted(self.mean)
        return {
            f"{prefix}names": np.array(names),
            f"{prefix}mean": np.array([self.mean[n] for n in names]),
            f"{prefix}std": np.array([self.std[n] for n in names]),
            f"{prefix}degenerate": np.array([n in self.degenerate for n in names]),
        }

    @classmethod
    def from_arrays(cls, arrays: dict, prefix: str) -> "NormStats":
        names = [str(n) for n in arrays[f"{prefix}names"]]
        mean = dict(zip(names, map(float, arrays[f"{prefix}mean"])))
        std = dict(zip(names, map(float, arrays[f"{prefix}std"])))
        deg = tuple(n for n, d in zip(names, arrays[f"{prefix}degenerate"]) if d)
        return cls(mean, std, deg)


@dataclass
class FeatureFrame:
    grid: TimeGrid
    station_ids: list[str]
    static: np.ndarray  # (S, ks)
    static_names: tuple[str, ...]
    glob: np.ndarray  # (T, G)
    global_names: tuple[str, ...]
    local: np.ndarray  # (S, T, L)
    local_names: tuple[str, ...]
    real_channels: tuple[str, ...] = ()
    ahead: tuple[str, ...] = ()
    norm: NormStats | None = None

    def __post_init__(self):
        S, T = len(self.station_ids), self.grid.length
        if self.static.shape != (S, len(self.static_names)):
            raise ConfigError("static block shape mismatch")
        if self.glob.shape != (T, len(self.global_names)):
            raise ConfigError("global block shape mismatch")
        if self.local.shape != (S, T, len(self.local_names)):
            raise ConfigError("local block shape mismatch")

    @property
    def normalized(self) -> bool:
        return self.norm is not None

    def local_split(self) -> tuple[np.ndarray, np.ndarray]:
        """Local channels split into (observed-at-step, known-ahead) blocks."""
        past = [i for i, n in enumerate(self.local_names) if n not in self.ahead]
        ahead = [i for i, n in enumerate(self.local_names) if n in self.ahead]
        return self.local[:, :, past], self.local[:, :, ahead]

    def channel(self, name: str) -> np.ndarray:
        if name in self.global_names:
            return self.glob[:, self.global_names.index(name)]
        if name in self.local_names:
            return self.local[:, :, self.local_names.index(name)]
        if name in self.static_names:
            return self.static[:, self.static_names.index(name)]
        raise KeyError(name)


def fit_norm_stats(frame: FeatureFrame, split: SplitSpec) -> NormStats:
    """Mean/std of every real-valued global and local channel over the training split."""
    if frame.normalized:
        raise ConfigError("frame is already normalised")
    n = split.train_end
    mean, std, deg = {}, {}, []
    for name in frame.real_channels:
        if name in frame.global_names:
            vals = frame.glob[:n, frame.global_names.index(name)]
        else:
            vals = frame.local[:, :n, frame.local_names.index(name)]
        vals = vals[np.isfinite(vals)]
        m = float(vals.mean()) if vals.size else 0.0
        s = float(vals.std()) if vals.size else 0.0
        if not s > 1e-12:
            s = 1.0
            deg.append(name)
        mean[name], std[name] = m, s
    return NormStats(mean, std, tuple(deg))


def apply_norm(frame: FeatureFrame, stats: NormStats) -> FeatureFrame:
    if frame.normalized:
        raise ConfigError("frame is already normalised; refusing to normalise twice")
    glob = frame.glob.copy()
    local = frame.local.copy()
    for name in frame.real_channels:
        m, s = stats.mean[name], stats.std[name]
        if name in frame.global_names:
            i = frame.global_names.index(name)
            glob[:, i] = (glob[:, i] - m) / s
        else:
            i = frame.local_names.index(name)
            local[:, :, i] = (local[:, :, i] - m) / s
    return replace(frame, glob=glob, local=local, norm=stats)


# ---------------------------------------------------------------------------
# assembly


def _one_hot(idx: np.ndarray, n: int) -> np.ndarray:
    return np.eye(n)[idx]


def holiday_flags(grid: TimeGrid, holidays) -> np.ndarray:
    days = set(np.datetime64(d, "D") for d in holidays)
    return np.array([d in days for d in grid.dates()], dtype=np.float64)


def calendar_block(grid: TimeGrid, holidays, include_holiday: bool = True, include_quarter: bool = False):
    blocks = [_one_hot(grid.hour_of_day(), 24), _one_hot(grid.day_of_week(), 7)]
    names = [f"hour_{h}" for h in range(24)] + [f"dow_{d}" for d in range(7)]
    if include_quarter:
        blocks.append(_one_hot(grid.quarter_of_hour(), 4))
        names += [f"quarter_{q}" for q in range(4)]
    if include_holiday:
        blocks.append(holiday_flags(grid, holidays)[:, None])
        names.append("holiday")
    return np.concatenate(blocks, axis=1), names


def capacity_block(stations: list[StationMeta], max_capacity: float | None = None) -> np.ndarray:
    """Capacity scaled by the network-wide maximum into [0, 1]."""
    caps = np.array([s.capacity for s in stations], dtype=np.float64)
    top = max_capacity if max_capacity is not None else (caps.max() if caps.size else 1.0)
    return (caps / top)[:, None]


def assemble_stage1_features(stations: list[StationMeta], grid: TimeGrid, weather: np.ndarray, holidays,
                             max_capacity: float | None = None) -> FeatureFrame:
    """Hourly frame: calendar one-hots, holiday flag, weather reals and capacity."""
    if grid.resolution != 60:
        raise ConfigError("stage-1 features live on the hourly grid")
    weather = np.asarray(weather, dtype=np.float64)
    if weather.shape != (grid.length, 3):
        raise DataError(f"weather covers {weather.shape[0]} hours, grid needs {grid.length}")
    if not np.all(np.isfinite(weather)):
        raise DataError("weather contains gaps beyond the fill limit")
    cal, names = calendar_block(grid, holidays, include_holiday=True)
    glob = np.concatenate([cal, weather], axis=1)
    return FeatureFrame(
        grid=grid,
        station_ids=[s.id for s in stations],
        static=capacity_block(stations, max_capacity),
        static_names=("capacity",),
        glob=glob,
        global_names=tuple(names) + WEATHER_NAMES,
        local=np.zeros((len(stations), grid.length, 0)),
        local_names=(),
        real_channels=WEATHER_NAMES,
    )


STAGE2_LOCAL = ("mu_quarter", "sigma_hour", "delta_pickup", "delta_dropoff", "metro_dev")
STAGE2_AHEAD = ("mu_quarter", "sigma_hour")


def assemble_stage2_features(stations: list[StationMeta], grid: TimeGrid, stage1_mu: np.ndarray,
                             stage1_sigma: np.ndarray, delta_pickup: np.ndarray, delta_dropoff: np.ndarray,
                             metro_dev: np.ndarray, holidays=(), include_holiday: bool = False,
                             max_capacity: float | None = None) -> FeatureFrame:
    """Quarter-hour frame combining Stage-1 expectations with variation signals.

    ``stage1_mu`` / ``stage1_sigma`` are hourly ``(S, H)`` arrays with NaN
    where the archive has no forecast. Each quarter receives one quarter of
    its parent hour's mean and the parent's standard deviation. ``metro_dev``
    is the check-out deviation for pickup models and the check-in deviation
    for drop-off models.
    """
    if grid.resolution != 15:
        raise ConfigError("stage-2 features live on the 15-minute grid")
    S = len(stations)
    hours = grid.hour_index()
    stage1_mu = np.asarray(stage1_mu, dtype=np.float64)
    stage1_sigma = np.asarray(stage1_sigma, dtype=np.float64)
    if stage1_mu.shape[0] != S or stage1_mu.shape[1] <= hours.max():
        raise DataError("stage-1 archive does not cover every parent hour of the grid")
    local = np.stack(
        [
            stage1_mu[:, hours] / 4.0,
            stage1_sigma[:, hours],
            np.asarray(delta_pickup, dtype=np.float64),
            np.asarray(delta_dropoff, dtype=np.float64),
            np.asarray(metro_dev, dtype=np.float64),
        ],
        axis=-1,
    )
    cal, names = calendar_block(grid, holidays, include_holiday=include_holiday, include_quarter=True)
    return FeatureFrame(
        grid=grid,
        station_ids=[s.id for s in stations],
        static=capacity_block(stations, max_capacity),
        static_names=("capacity",),
        glob=cal,
        global_names=tuple(names),
        local=local,
        local_names=STAGE2_LOCAL,
        real_channels=STAGE2_LOCAL,
        ahead=STAGE2_AHEAD,
    )


def write_features_csv(frame: FeatureFrame, path) -> None:
    """One row per (station, interval) with every named channel."""
    cols = ["station_id", "interval"] + list(frame.static_names) + list(frame.global_names) + list(frame.local_names)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for s, sid in enumerate(frame.station_ids):
            for t in range(frame.grid.length):
                w.writerow(
                    [sid, t]
                    + [repr(float(v)) for v in frame.static[s]]
                    + [repr(float(v)) for v in frame.glob[t]]
                    + [repr(float(v)) for v in frame.local[s, t]]
                )
