"""Aligned, validated arrays for one study area and period."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import date, datetime
from pathlib import Path

import numpy as np

from .errors import DataError
from .ingest import (
    MetroStation,
    ProximityLink,
    StationMeta,
    link_metro_stations,
    load_holidays,
    metro_flow_arrays,
    parse_metro,
    parse_metro_stations,
    parse_stations,
    parse_trips,
    parse_weather,
    weather_array,
)
from .timegrid import KINDS, TimeGrid, aggregate_all

BUNDLE_VERSION = 1


@dataclass
class DatasetBundle:
    grid: TimeGrid  # 15-minute grid
    stations: list[StationMeta]
    metro_stations: list[MetroStation]
    counts: dict[str, np.ndarray]  # kind -> (S, T) int counts
    weather: np.ndarray  # (H, 3)
    metro_in: np.ndarray  # (M, T)
    metro_out: np.ndarray  # (M, T)
    holidays: tuple[date, ...] = ()
    proximity: float = 300.0
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        S, T = len(self.stations), self.grid.length
        if self.grid.resolution != 15:
            raise DataError("bundles live on the 15-minute grid")
        if T % 4:
            raise DataError("the grid must cover whole hours")
        for kind in KINDS:
            if self.counts[kind].shape != (S, T):
                raise DataError(f"{kind} counts do not match stations x intervals")
        M = len(self.metro_stations)
        if self.metro_in.shape != (M, T) or self.metro_out.shape != (M, T):
            raise DataError("metro flows do not match metro stations x intervals")
        if self.weather.shape != (T // 4, 3):
            raise DataError("weather does not cover every hour of the grid")

    @property
    def station_ids(self) -> list[str]:
        return [s.id for s in self.stations]

    @property
    def metro_ids(self) -> list[str]:
        return [m.id for m in self.metro_stations]

    @property
    def hourly_grid(self) -> TimeGrid:
        return self.grid.hourly()

    def links(self) -> list[ProximityLink]:
        by_id = link_metro_stations(self.stations, self.metro_stations, self.proximity)
        return [by_id[s.id] for s in self.stations]

    def station_index(self, ids) -> np.ndarray:
        lookup = {s: i for i, s in enumerate(self.station_ids)}
        missing = [i for i in ids if i not in lookup]
        if missing:
            raise DataError(f"unknown station ids: {missing}")
        return np.array([lookup[i] for i in ids], dtype=np.int64)

    def window(self, lo: int, hi: int) -> "DatasetBundle":
        """Bundle restricted to quarters ``[lo, hi)``; both must be whole hours."""
        if lo % 4 or hi % 4 or not 0 <= lo < hi <= self.grid.length:
            raise DataError(f"cannot cut the bundle to [{lo}, {hi})")
        return DatasetBundle(
            grid=self.grid.slice(lo, hi),
            stations=list(self.stations),
            metro_stations=list(self.metro_stations),
            counts={k: v[:, lo:hi] for k, v in self.counts.items()},
            weather=self.weather[lo // 4 : hi // 4],
            metro_in=self.metro_in[:, lo:hi],
            metro_out=self.metro_out[:, lo:hi],
            holidays=self.holidays,
            proximity=self.proximity,
        )

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        meta = {
            "version": BUNDLE_VERSION,
            "start": self.grid.start.isoformat(),
            "length": self.grid.length,
            "stations": [[s.id, s.lat, s.lon, s.capacity] for s in self.stations],
            "metro_stations": [[m.id, m.lat, m.lon] for m in self.metro_stations],
            "holidays": [d.isoformat() for d in self.holidays],
            "proximity": self.proximity,
            "report": self.report,
        }
        with open(path, "wb") as fh:
            np.savez(
                fh,
                pickup=self.counts["pickup"],
                dropoff=self.counts["dropoff"],
                weather=self.weather,
                metro_in=self.metro_in,
                metro_out=self.metro_out,
                __meta__=np.array(json.dumps(meta, sort_keys=True)),
            )

    @classmethod
    def load(cls, path) -> "DatasetBundle":
        path = Path(path)
        if not path.exists():
            raise DataError(f"missing dataset bundle: {path}")
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            if meta.get("version") != BUNDLE_VERSION:
                raise DataError(f"unsupported bundle version {meta.get('version')}")
            return cls(
                grid=TimeGrid(datetime.fromisoformat(meta["start"]), 15, meta["length"]),
                stations=[StationMeta(i, la, lo, c) for i, la, lo, c in meta["stations"]],
                metro_stations=[MetroStation(i, la, lo) for i, la, lo in meta["metro_stations"]],
                counts={"pickup": data["pickup"].copy(), "dropoff": data["dropoff"].copy()},
                weather=data["weather"].copy(),
                metro_in=data["metro_in"].copy(),
                metro_out=data["metro_out"].copy(),
                holidays=tuple(date.fromisoformat(d) for d in meta["holidays"]),
                proximity=meta["proximity"],
                report=meta["report"],
            )


def from_synth(data) -> DatasetBundle:
    """Bundle a ``synth.SynthData`` directly, skipping the CSV round trip."""
    return DatasetBundle(
        grid=data.grid,
        stations=list(data.stations),
        metro_stations=list(data.metro_stations),
        counts={k: np.asarray(v, dtype=np.int64) for k, v in data.counts.items()},
        weather=np.asarray(data.weather, dtype=np.float64),
        metro_in=np.asarray(data.metro_in, dtype=np.float64),
        metro_out=np.asarray(data.metro_out, dtype=np.float64),
        holidays=tuple(data.holidays),
    )


def from_csv(paths: dict, start: datetime, days: int, proximity: float = 300.0,
             weather_max_gap: int = 3) -> DatasetBundle:
    """Parse every input file and align it on a 15-minute grid of ``days`` days.

    ``paths`` maps ``trips``, ``metro``, ``weather``, ``stations``,
    ``metro_stations`` and ``holidays`` to files.
    """
    for key in ("trips", "metro", "weather", "stations", "metro_stations", "holidays"):
        if key not in paths:
            raise DataError(f"no path configured for {key}")
        if not Path(paths[key]).exists():
            raise DataError(f"missing input file: {paths[key]}")
    grid = TimeGrid(start, 15, days * 96)
    stations = parse_stations(paths["stations"])
    metros = parse_metro_stations(paths["metro_stations"])
    ids = [s.id for s in stations]
    trips, trip_report = parse_trips(paths["trips"], known_stations=set(ids))
    counts = {}
    discarded = {}
    for kind in KINDS:
        counts[kind], discarded[kind] = aggregate_all(trips, grid, ids, kind)
    metro_records, metro_report = parse_metro(paths["metro"], grid)
    metro_in, metro_out = metro_flow_arrays(metro_records, [m.id for m in metros], grid.length)
    weather_records, weather_report = parse_weather(paths["weather"], grid.hourly(), weather_max_gap)
    holidays = tuple(sorted(load_holidays(paths["holidays"])))
    report = {
        "trips": trip_report.as_dict(),
        "metro": metro_report.as_dict(),
        "weather": weather_report.as_dict(),
        "discarded_endpoints": discarded,
    }
    return DatasetBundle(
        grid=grid, stations=stations, metro_stations=metros,
        counts={k: np.asarray(v, dtype=np.int64) for k, v in counts.items()},
        weather=weather_array(weather_records), metro_in=metro_in, metro_out=metro_out,
        holidays=holidays, proximity=proximity, report=report,
    )
