"""CSV ingestion for trips, metro flows, weather, holidays and station metadata.

Schemas are fixed (no inference):

* ``trips.csv``: ``start_time,end_time,start_station_id,end_station_id``
* ``metro.csv``: ``interval_start,metro_station_id,check_ins,check_outs``
* ``weather.csv``: ``hour_start,temperature_c,precip_mm,wind_mps``
* ``stations.csv``: ``station_id,lat,lon,capacity``
* ``metro_stations.csv``: ``metro_station_id,lat,lon``
* ``holidays.txt``: one ISO date per line

Parsing is total: each data row is either returned as a record or counted
under exactly one rejection class.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, datetime
from pathlib import Path

import numpy as np

from .errors import DataError
from .timegrid import TimeGrid

EARTH_RADIUS_M = 6_371_000.0

TRIP_COLUMNS = ("start_time", "end_time", "start_station_id", "end_station_id")
METRO_COLUMNS = ("interval_start", "metro_station_id", "check_ins", "check_outs")
WEATHER_COLUMNS = ("hour_start", "temperature_c", "precip_mm", "wind_mps")
STATION_COLUMNS = ("station_id", "lat", "lon", "capacity")
METRO_STATION_COLUMNS = ("metro_station_id", "lat", "lon")


@dataclass(frozen=True)
class TripRecord:
    start_time: datetime
    end_time: datetime
    origin: str
    destination: str


@dataclass(frozen=True)
class StationMeta:
    id: str
    lat: float
    lon: float
    capacity: int

    def __post_init__(self):
        if self.capacity < 1:
            raise DataError(f"station {self.id}: capacity must be >= 1")
        if not (-90 <= self.lat <= 90 and -180 <= self.lon <= 180):
            raise DataError(f"station {self.id}: coordinates out of range")


@dataclass(frozen=True)
class MetroStation:
    id: str
    lat: float
    lon: float


@dataclass(frozen=True)
class MetroFlowRecord:
    metro_station: str
    interval: int
    check_ins: int
    check_outs: int


@dataclass(frozen=True)
class WeatherRecord:
    hour: int
    temperature: float
    precipitation: float
    wind_speed: float


@dataclass(frozen=True)
class ProximityLink:
    bike_station: str
    metro_stations: frozenset
    threshold: float


@dataclass
class RejectionReport:
    rows: int = 0
    accepted: int = 0
    rejected: Counter = field(default_factory=Counter)

    def reject(self, reason: str) -> None:
        self.rejected[reason] += 1

    @property
    def total_rejected(self) -> int:
        return sum(self.rejected.values())

    def reconciles(self) -> bool:
        return self.accepted + self.total_rejected == self.rows

    def as_dict(self) -> dict:
        return {"rows": self.rows, "accepted": self.accepted, **{f"rejected_{k}": v for k, v in sorted(self.rejected.items())}}


def parse_timestamp(text: str) -> datetime:
    ts = datetime.fromisoformat(text.strip())
    if ts.tzinfo is not None:
        # single fixed-offset service timezone: keep the local wall time
        ts = ts.replace(tzinfo=None)
    return ts


def _open_csv(path, required):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing input file: {path}")
    fh = open(path, newline="", encoding="utf-8")
    reader = csv.DictReader(fh)
    header = reader.fieldnames or []
    missing = [c for c in required if c not in header]
    if missing:
        fh.close()
        raise DataError(f"{path}: missing required columns {missing}")
    return fh, reader


def _malformed(row, required) -> bool:
    return None in row or any(row.get(c) in (None, "") for c in required)


def parse_trips(path, known_stations=None) -> tuple[list[TripRecord], RejectionReport]:
    """Parse trip records, rejecting malformed rows by class.

    Classes: ``malformed_row`` (wrong field count or empty field),
    ``bad_timestamp``, ``negative_duration`` and, when ``known_stations``
    is given, ``unknown_station`` (neither endpoint is a known station).
    """
    fh, reader = _open_csv(path, TRIP_COLUMNS)
    report = RejectionReport()
    trips = []
    with fh:
        for row in reader:
            report.rows += 1
            if _malformed(row, TRIP_COLUMNS):
                report.reject("malformed_row")
                continue
            try:
                start = parse_timestamp(row["start_time"])
                end = parse_timestamp(row["end_time"])
            except ValueError:
                report.reject("bad_timestamp")
                continue
            if end < start:
                report.reject("negative_duration")
                continue
            origin = row["start_station_id"].strip()
            dest = row["end_station_id"].strip()
            if known_stations is not None and origin not in known_stations and dest not in known_stations:
                report.reject("unknown_station")
                continue
            trips.append(TripRecord(start, end, origin, dest))
            report.accepted += 1
    return trips, report


def parse_metro(path, grid: TimeGrid) -> tuple[list[MetroFlowRecord], RejectionReport]:
    """Metro entries/exits per 15-minute interval of ``grid``."""
    fh, reader = _open_csv(path, METRO_COLUMNS)
    report = RejectionReport()
    records = []
    with fh:
        for row in reader:
            report.rows += 1
            if _malformed(row, METRO_COLUMNS):
                report.reject("malformed_row")
                continue
            try:
                ts = parse_timestamp(row["interval_start"])
            except ValueError:
                report.reject("bad_timestamp")
                continue
            try:
                cin, cout = int(row["check_ins"]), int(row["check_outs"])
            except ValueError:
                report.reject("bad_count")
                continue
            if cin < 0 or cout < 0:
                report.reject("bad_count")
                continue
            t = grid.index_of(ts)
            if t is None:
                report.reject("out_of_grid")
                continue
            records.append(MetroFlowRecord(row["metro_station_id"].strip(), t, cin, cout))
            report.accepted += 1
    return records, report


def metro_flow_arrays(records, metro_ids: list[str], length: int) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``(n_metro, length)`` check-in and check-out matrices (absent rows are 0)."""
    row = {m: i for i, m in enumerate(metro_ids)}
    cin = np.zeros((len(metro_ids), length))
    cout = np.zeros((len(metro_ids), length))
    for rec in records:
        i = row.get(rec.metro_station)
        if i is None:
            continue
        cin[i, rec.interval] += rec.check_ins
        cout[i, rec.interval] += rec.check_outs
    return cin, cout


def parse_weather(path, grid: TimeGrid, max_gap: int = 3) -> tuple[list[WeatherRecord], RejectionReport]:
    """Hourly weather over ``grid`` with missing hours forward-filled.

    A run of more than ``max_gap`` missing hours, or missing leading hours
    (nothing to fill from), raises DataError.
    """
    if grid.resolution != 60:
        raise DataError("weather must be parsed onto an hourly grid")
    fh, reader = _open_csv(path, WEATHER_COLUMNS)
    report = RejectionReport()
    by_hour: dict[int, WeatherRecord] = {}
    with fh:
        for row in reader:
            report.rows += 1
            if _malformed(row, WEATHER_COLUMNS):
                report.reject("malformed_row")
                continue
            try:
                ts = parse_timestamp(row["hour_start"])
            except ValueError:
                report.reject("bad_timestamp")
                continue
            try:
                temp, precip, wind = (float(row[c]) for c in WEATHER_COLUMNS[1:])
            except ValueError:
                report.reject("bad_value")
                continue
            if precip < 0 or wind < 0 or not all(map(math.isfinite, (temp, precip, wind))):
                report.reject("bad_value")
                continue
            h = grid.index_of(ts)
            if h is None:
                report.reject("out_of_grid")
                continue
            if h in by_hour:
                report.reject("duplicate_hour")
                continue
            by_hour[h] = WeatherRecord(h, temp, precip, wind)
            report.accepted += 1
    out = []
    gap = 0
    for h in range(grid.length):
        rec = by_hour.get(h)
        if rec is None:
            gap += 1
            if not out:
                raise DataError(f"weather is missing at the start of the grid (hour {h})")
            if gap > max_gap:
                raise DataError(f"weather gap longer than {max_gap} hours ending at hour {h}")
            prev = out[-1]
            rec = WeatherRecord(h, prev.temperature, prev.precipitation, prev.wind_speed)
        else:
            gap = 0
        out.append(rec)
    return out, report


def weather_array(records: list[WeatherRecord]) -> np.ndarray:
    """``(hours, 3)`` array of temperature, precipitation, wind speed."""
    return np.array([[w.temperature, w.precipitation, w.wind_speed] for w in records], dtype=np.float64).reshape(-1, 3)


def load_holidays(path) -> set[date]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing input file: {path}")
    days = set()
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            days.add(date.fromisoformat(line))
        except ValueError as exc:
            raise DataError(f"{path}:{n}: not an ISO date: {line!r}") from exc
    return days


def parse_stations(path) -> list[StationMeta]:
    fh, reader = _open_csv(path, STATION_COLUMNS)
    out = []
    seen = set()
    with fh:
        for n, row in enumerate(reader, 2):
            if _malformed(row, STATION_COLUMNS):
                raise DataError(f"{path}:{n}: malformed station row")
            try:
                meta = StationMeta(row["station_id"].strip(), float(row["lat"]), float(row["lon"]), int(row["capacity"]))
            except ValueError as exc:
                raise DataError(f"{path}:{n}: {exc}") from exc
            if meta.id in seen:
                raise DataError(f"{path}:{n}: duplicate station id {meta.id}")
            seen.add(meta.id)
            out.append(meta)
    return out


def parse_metro_stations(path) -> list[MetroStation]:
    fh, reader = _open_csv(path, METRO_STATION_COLUMNS)
    out = []
    with fh:
        for n, row in enumerate(reader, 2):
            if _malformed(row, METRO_STATION_COLUMNS):
                raise DataError(f"{path}:{n}: malformed metro station row")
            try:
                out.append(MetroStation(row["metro_station_id"].strip(), float(row["lat"]), float(row["lon"])))
            except ValueError as exc:
                raise DataError(f"{path}:{n}: {exc}") from exc
    return out


def haversine_m(lat1, lon1, lat2, lon2) -> float:
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dphi = p2 - p1
    dlmb = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))


def link_metro_stations(bikes: list[StationMeta], metros, threshold: float = 300.0) -> dict[str, ProximityLink]:
    """Link each bike station to every metro station within ``threshold`` metres.

    ``metros`` holds ``MetroStation`` objects or ``(id, (lat, lon))`` pairs.
    """
    if threshold <= 0:
        raise DataError("proximity threshold must be positive")
    points = []
    for m in metros:
        if isinstance(m, MetroStation):
            points.append((m.id, m.lat, m.lon))
        else:
            mid, (lat, lon) = m
            points.append((mid, lat, lon))
    links = {}
    for b in bikes:
        near = frozenset(mid for mid, lat, lon in points if haversine_m(b.lat, b.lon, lat, lon) <= threshold)
        links[b.id] = ProximityLink(b.id, near, threshold)
    return links
