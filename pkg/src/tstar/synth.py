"""Synthetic dock-network demand with a known generating process.

Each (station, quarter) count is drawn from a zero-inflated Negative
Binomial whose mean is

    base(dow, hour) / 4 * quarter_weight * weather_factor * metro_factor * holiday_factor

Metro coupling runs through a persistent latent log-deviation per metro
station that scales both the metro flows and the bike demand of linked
stations, so recent metro deviations carry real information about the
next quarter.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .ingest import MetroStation, StationMeta, haversine_m
from .timegrid import KINDS, TimeGrid

CENTER = (38.9, -77.03)
METRES_PER_DEG_LAT = 111_320.0


@dataclass
class SynthSpec:
    n_stations: int = 20
    days: int = 120
    seed: int = 0
    start: datetime = datetime(2023, 1, 2)
    quarter_weights: tuple[float, ...] = (2.0, 0.8, 0.8, 0.4)
    level_range: tuple[float, float] = (1.0, 4.0)
    base_rates: np.ndarray | None = None  # optional (S, 7, 24) hourly base per kind-agnostic station
    dropoff_ratio: float = 1.0
    weekend_factor: float = 0.7
    temperature_coef: float = 0.03
    precipitation_coef: float = 0.5
    metro_coupling: float = 0.6
    metro_persistence: float = 0.9
    metro_noise: float = 0.25
    metro_base: float = 30.0
    n_metro: int = 4
    linked_stations: int | None = None  # default: half of the stations
    r_true: float = 3.0
    zero_inflation: float = 0.1
    holidays: tuple[date, ...] = ()
    holiday_factor: float = 0.7
    capacity_range: tuple[int, int] = (11, 35)

    def validate(self) -> None:
        if self.n_stations < 1 or self.days < 1:
            raise ConfigError("synthetic data needs at least one station and one day")
        w = np.asarray(self.quarter_weights, dtype=np.float64)
        if w.shape != (4,) or np.any(w < 0) or not math.isclose(w.sum(), 4.0, abs_tol=1e-9):
            raise ConfigError("quarter weights must be four non-negative values summing to 4")
        if not 0 <= self.zero_inflation < 1:
            raise ConfigError("zero-inflation mass must lie in [0, 1)")
        if self.r_true <= 0:
            raise ConfigError("NB dispersion must be positive")
        if self.level_range[0] < 0 or self.level_range[1] < self.level_range[0]:
            raise ConfigError("invalid level range")
        if self.base_rates is not None:
            b = np.asarray(self.base_rates)
            if b.shape != (self.n_stations, 7, 24) or np.any(b < 0):
                raise ConfigError("base_rates must be a non-negative (stations, 7, 24) array")
        if not 0 <= self.metro_persistence < 1:
            raise ConfigError("metro persistence must lie in [0, 1)")
        if (self.linked_stations or 0) > self.n_stations or self.n_metro < 0:
            raise ConfigError("cannot link more stations than exist")
        if self.start.minute or self.start.second or self.start.hour:
            raise ConfigError("synthetic data must start at midnight")


@dataclass
class SynthData:
    spec: SynthSpec
    grid: TimeGrid  # 15-minute grid
    stations: list[StationMeta]
    metro_stations: list[MetroStation]
    counts: dict[str, np.ndarray]  # kind -> (S, T) observed counts
    rates: dict[str, np.ndarray]  # kind -> (S, T) NB means before zero-inflation
    base: dict[str, np.ndarray]  # kind -> (S, 7, 24) hourly base profile
    weather: np.ndarray  # (days * 24, 3)
    metro_in: np.ndarray  # (M, T)
    metro_out: np.ndarray  # (M, T)
    holidays: tuple[date, ...] = field(default_factory=tuple)

    def true_mean(self, kind: str) -> np.ndarray:
        """Expected observed count (zero-inflation included)."""
        return (1.0 - self.spec.zero_inflation) * self.rates[kind]

    def write(self, out_dir) -> dict[str, Path]:
        return write_dataset(self, out_dir)


def _daily_shape() -> np.ndarray:
    h = np.arange(24)
    shape = 0.15 + np.exp(-0.5 * ((h - 8) / 1.5) ** 2) + 0.8 * np.exp(-0.5 * ((h - 17.5) / 2.0) ** 2) \
        + 0.3 * np.exp(-0.5 * ((h - 13) / 3.0) ** 2)
    shape[:6] *= 0.3
    return shape / shape.mean()


def _base_profiles(spec: SynthSpec, rng) -> np.ndarray:
    if spec.base_rates is not None:
        return np.asarray(spec.base_rates, dtype=np.float64)
    levels = rng.uniform(*spec.level_range, size=spec.n_stations)
    shape = _daily_shape()
    week = np.ones(7)
    week[5:] = spec.weekend_factor
    return levels[:, None, None] * week[None, :, None] * shape[None, None, :]


def _place(rng, n, spread_m=3000.0):
    dy = rng.uniform(-spread_m, spread_m, size=n)
    dx = rng.uniform(-spread_m, spread_m, size=n)
    lat = CENTER[0] + dy / METRES_PER_DEG_LAT
    lon = CENTER[1] + dx / (METRES_PER_DEG_LAT * math.cos(math.radians(CENTER[0])))
    return lat, lon


def _offset(lat, lon, north_m, east_m):
    lat, lon = float(lat), float(lon)
    return (lat + float(north_m) / METRES_PER_DEG_LAT,
            lon + float(east_m) / (METRES_PER_DEG_LAT * math.cos(math.radians(lat))))


def _weather(days: int, rng) -> np.ndarray:
    hours = days * 24
    h = np.arange(hours)
    temp = 12.0 + 6.0 * np.sin(2 * np.pi * (h % 24 - 9) / 24) + np.cumsum(rng.normal(0, 0.3, hours)) * 0.2
    temp += 4.0 * np.sin(2 * np.pi * h / (24 * 30))
    wet = np.zeros(hours)
    state = False
    for i in range(hours):
        state = rng.random() < (0.85 if state else 0.02)
        wet[i] = state
    precip = wet * rng.gamma(1.5, 1.0, hours)
    wind = rng.gamma(3.0, 1.2, hours)
    return np.stack([np.round(temp, 2), np.round(precip, 2), np.round(wind, 2)], axis=1)


def generate(spec: SynthSpec) -> SynthData:
    """Draw a synthetic dataset; identical specs give identical data."""
    spec.validate()
    root = np.random.SeedSequence(spec.seed)
    s_layout, s_weather, s_metro, s_stations = root.spawn(4)
    rng_layout = np.random.default_rng(s_layout)
    S, M = spec.n_stations, spec.n_metro
    T = spec.days * 96
    grid = TimeGrid(spec.start, 15, T)
    dow, hour, quarter = grid.day_of_week(), grid.hour_of_day(), grid.quarter_of_hour()
    hours = grid.hour_index()

    lat, lon = _place(rng_layout, S)
    caps = rng_layout.integers(spec.capacity_range[0], spec.capacity_range[1] + 1, size=S)
    stations = [StationMeta(f"S{i:03d}", round(float(lat[i]), 6), round(float(lon[i]), 6), int(caps[i])) for i in range(S)]

    # metro stations sit within ~150 m of the first `linked_stations` bike stations
    metro_stations = []
    link_of = np.full(S, -1)
    n_linked = spec.linked_stations if spec.linked_stations is not None else S // 2
    for b in range(n_linked if M else 0):
        m = b % M
        if m == len(metro_stations):
            mlat, mlon = _offset(lat[b], lon[b], 80.0, -60.0)
            metro_stations.append(MetroStation(f"M{m:02d}", round(mlat, 6), round(mlon, 6)))
        link_of[b] = m
    # a linked bike station must be within 300 m of its metro station; nudge it there
    for b in np.flatnonzero(link_of >= 0):
        ms = metro_stations[link_of[b]]
        nlat, nlon = _offset(ms.lat, ms.lon, -50.0 + 10.0 * (b % 5), 40.0)
        stations[b] = StationMeta(stations[b].id, round(nlat, 6), round(nlon, 6), stations[b].capacity)
    # unlinked stations must sit well outside every metro catchment
    for b in np.flatnonzero(link_of < 0):
        st = stations[b]
        while any(haversine_m(st.lat, st.lon, ms.lat, ms.lon) < 600.0 for ms in metro_stations):
            nlat, nlon = _offset(st.lat, st.lon, 700.0, 700.0)
            st = StationMeta(st.id, round(nlat, 6), round(nlon, 6), st.capacity)
        stations[b] = st

    weather = _weather(spec.days, np.random.default_rng(s_weather))
    temp_q = weather[hours, 0]
    precip_q = weather[hours, 1]
    weather_factor = np.exp(spec.temperature_coef * (temp_q - 12.0) - spec.precipitation_coef * np.minimum(precip_q, 3.0))
    holiday_days = set(np.datetime64(d, "D") for d in spec.holidays)
    holiday_factor = np.where([d in holiday_days for d in grid.dates()], spec.holiday_factor, 1.0)

    # latent metro deviations: AR(1) in log space, separate for entries and exits
    rng_metro = np.random.default_rng(s_metro)
    latent = {}
    metro_flow = {}
    metro_shape = _daily_shape()[hour] * np.where(dow >= 5, spec.weekend_factor, 1.0)
    for direction in ("in", "out"):
        z = np.zeros((M, T))
        innov = rng_metro.normal(0.0, spec.metro_noise, size=(M, T))
        sd0 = spec.metro_noise / math.sqrt(1 - spec.metro_persistence**2)
        if M:
            z[:, 0] = rng_metro.normal(0.0, sd0, size=M)
        for t in range(1, T):
            z[:, t] = spec.metro_persistence * z[:, t - 1] + innov[:, t]
        latent[direction] = z
        lam = spec.metro_base * metro_shape[None, :] * np.exp(z - 0.5 * sd0**2)
        metro_flow[direction] = rng_metro.poisson(lam).astype(np.float64)

    base_p = _base_profiles(spec, rng_layout)
    bases = {"pickup": base_p, "dropoff": base_p * spec.dropoff_ratio}
    qw = np.asarray(spec.quarter_weights, dtype=np.float64)[quarter]
    station_seeds = s_stations.spawn(S)
    rates = {k: np.zeros((S, T)) for k in KINDS}
    counts = {k: np.zeros((S, T), dtype=np.int64) for k in KINDS}
    for i in range(S):
        rng_i = np.random.default_rng(station_seeds[i])
        for kind, direction in (("pickup", "out"), ("dropoff", "in")):
            if link_of[i] >= 0:
                metro_factor = np.exp(spec.metro_coupling * latent[direction][link_of[i]])
            else:
                metro_factor = np.ones(T)
            lam = bases[kind][i, dow, hour] / 4.0 * qw * weather_factor * metro_factor * holiday_factor
            rates[kind][i] = lam
            g = rng_i.gamma(spec.r_true, lam / spec.r_true)
            y = rng_i.poisson(g)
            zero = rng_i.random(T) < spec.zero_inflation
            counts[kind][i] = np.where(zero, 0, y)
    return SynthData(
        spec=spec, grid=grid, stations=stations, metro_stations=metro_stations, counts=counts, rates=rates,
        base=bases, weather=weather, metro_in=metro_flow["in"], metro_out=metro_flow["out"],
        holidays=tuple(sorted(spec.holidays)),
    )


def oracle_samples(data: SynthData, kind: str, station_index: np.ndarray, quarters: np.ndarray,
                   n_samples: int = 100, seed: int = 0) -> np.ndarray:
    """Draws from the true per-interval zero-inflated NB, one generator per forecast."""
    r = data.spec.r_true
    pi0 = data.spec.zero_inflation
    out = np.empty((len(quarters), n_samples), dtype=np.int64)
    for j, (s, t) in enumerate(zip(station_index, quarters)):
        rng = np.random.default_rng([seed, 7, int(s), int(t)])
        lam = data.rates[kind][s, t]
        if lam <= 0:
            out[j] = 0
            continue
        y = rng.poisson(rng.gamma(r, lam / r, size=n_samples))
        y[rng.random(n_samples) < pi0] = 0
        out[j] = y
    out.sort(axis=1)
    return out


def _iso(ts: datetime) -> str:
    return ts.isoformat(sep=" ")


def write_dataset(data: SynthData, out_dir) -> dict[str, Path]:
    """Write the dataset in the ingest CSV schemas.

    Trips have one real endpoint; the other is the off-network station
    ``EXT`` so that aggregated counts reproduce the drawn counts exactly.
    Trip times are spread deterministically inside each interval.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = data.grid
    paths = {
        "trips": out / "trips.csv",
        "metro": out / "metro.csv",
        "weather": out / "weather.csv",
        "stations": out / "stations.csv",
        "metro_stations": out / "metro_stations.csv",
        "holidays": out / "holidays.txt",
    }
    ride = timedelta(minutes=12)
    with open(paths["trips"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["start_time", "end_time", "start_station_id", "end_station_id"])
        for kind in KINDS:
            c = data.counts[kind]
            for s, t in zip(*np.nonzero(c)):
                sid = data.stations[s].id
                t0 = grid.interval_start(int(t))
                n = int(c[s, t])
                for k in range(n):
                    ts = t0 + timedelta(seconds=int(60 + k * 780 // max(n, 1)))
                    if kind == "pickup":
                        w.writerow([_iso(ts), _iso(ts + ride), sid, "EXT"])
                    else:
                        w.writerow([_iso(ts - ride), _iso(ts), "EXT", sid])
    with open(paths["metro"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["interval_start", "metro_station_id", "check_ins", "check_outs"])
        stamps = [_iso(grid.interval_start(t)) for t in range(grid.length)]
        for m, ms in enumerate(data.metro_stations):
            cin, cout = data.metro_in[m], data.metro_out[m]
            for t in range(grid.length):
                w.writerow([stamps[t], ms.id, int(cin[t]), int(cout[t])])
    with open(paths["weather"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["hour_start", "temperature_c", "precip_mm", "wind_mps"])
        for h, (temp, precip, wind) in enumerate(data.weather):
            w.writerow([_iso(grid.start + timedelta(hours=h)), repr(float(temp)), repr(float(precip)), repr(float(wind))])
    with open(paths["stations"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "lat", "lon", "capacity"])
        for s in data.stations:
            w.writerow([s.id, repr(s.lat), repr(s.lon), s.capacity])
    with open(paths["metro_stations"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metro_station_id", "lat", "lon"])
        for m in data.metro_stations:
            w.writerow([m.id, repr(m.lat), repr(m.lon)])
    paths["holidays"].write_text("".join(f"{d.isoformat()}\n" for d in data.holidays))
    return paths
