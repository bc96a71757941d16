"""Two-stage forecasting: hourly expectations first, then quarter-hour refinement.

Stage 1 is a global hourly model. Its rolling one-step forecasts are
stored in a ``Stage1Archive`` and turned into variation signals (observed
quarter minus a quarter of the hourly mean). Stage 2 is a global
quarter-hour model that consumes those signals, the archived mean and
spread, and nearby metro deviations. Baselines live here as well because
they share the same inputs.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import transformer as tf
from .bundle import DatasetBundle
from .errors import ConfigError, DataError
from .evaluation import score_forecasts
from .features import (
    STAGE2_AHEAD,
    FeatureFrame,
    NormStats,
    apply_norm,
    assemble_stage1_features,
    assemble_stage2_features,
    fit_norm_stats,
    metro_deviation_matrix,
    seasonal_profile,
)
from .ingest import StationMeta
from .timegrid import KINDS, SplitSpec, to_hourly

logger = logging.getLogger(__name__)

SIGNAL_MODES = ("in_sample", "blocked")


def _stage1_train_default() -> tf.TrainConfig:
    return tf.TrainConfig(n_layers=1, hidden_size=64, dropout=0.1, learning_rate=6e-4)


def _stage2_train_default() -> tf.TrainConfig:
    return tf.TrainConfig(n_layers=3, hidden_size=16, dropout=0.1, learning_rate=1e-3)


@dataclass
class PipelineConfig:
    lookback1: int = 24
    horizon1: int = 1
    lookback2: int = 24
    horizon2: int = 1
    target: str = "pickup"
    n_samples: int = 100
    seed: int = 0
    signal_mode: str = "in_sample"
    station_dim: int = 8
    global_dim: int = 8
    stage2_holiday: bool = False
    stage1: tf.TrainConfig = field(default_factory=_stage1_train_default)
    stage2: tf.TrainConfig = field(default_factory=_stage2_train_default)

    def validate(self) -> None:
        if self.target not in KINDS:
            raise ConfigError(f"target must be one of {KINDS}, got {self.target!r}")
        if self.horizon1 != 1 or self.horizon2 != 1:
            raise ConfigError("only one-step-ahead horizons are supported")
        if self.lookback1 < 1 or self.lookback2 < 1:
            raise ConfigError("look-back windows must be at least 1")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be at least 1")
        if self.signal_mode not in SIGNAL_MODES:
            raise ConfigError(f"signal_mode must be one of {SIGNAL_MODES}")


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _kind_code(kind: str) -> int:
    if kind not in KINDS:
        raise ConfigError(f"unknown demand kind {kind!r}")
    return KINDS.index(kind)


# ---------------------------------------------------------------------------
# archive and signals


@dataclass
class Stage1Archive:
    """Rolling Stage-1 forecasts: ``mu``/``sigma`` are ``(S, H)`` with NaN where absent."""

    kind: str
    station_ids: list[str]
    mu: np.ndarray
    sigma: np.ndarray
    sigma_analytic: np.ndarray
    last_hour: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.last_hour is None:
            cov = np.isfinite(self.mu)
            idx = np.where(cov, np.arange(self.mu.shape[1])[None, :], -1)
            self.last_hour = idx.max(axis=1) if self.mu.size else np.full(len(self.station_ids), -1)

    @classmethod
    def empty(cls, kind: str, station_ids, n_hours: int) -> "Stage1Archive":
        S = len(station_ids)
        nan = np.full((S, n_hours), np.nan)
        return cls(kind, list(station_ids), nan, nan.copy(), nan.copy(), np.full(S, -1, dtype=np.int64))

    @property
    def covered(self) -> np.ndarray:
        return np.isfinite(self.mu)

    def append(self, station: int, hours, mu, sigma, sigma_analytic=None) -> None:
        """Add forecasts for one station; hours must move strictly forward."""
        hours = np.asarray(hours, dtype=np.int64)
        if hours.size == 0:
            return
        if np.any(np.diff(hours) <= 0) or hours[0] <= self.last_hour[station]:
            raise ConfigError("archive is append-only in forecast-time order")
        mu = np.asarray(mu, dtype=np.float64)
        sigma = np.asarray(sigma, dtype=np.float64)
        if np.any(~(mu > 0)) or np.any(sigma < 0):
            raise ConfigError("archive needs mu > 0 and sigma >= 0")
        self.mu[station, hours] = mu
        self.sigma[station, hours] = sigma
        self.sigma_analytic[station, hours] = np.nan if sigma_analytic is None else sigma_analytic
        self.last_hour[station] = hours[-1]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["station_id", "hour_index", "mu", "sigma"])
            for s, sid in enumerate(self.station_ids):
                for h in np.flatnonzero(self.covered[s]):
                    w.writerow([sid, int(h), repr(float(self.mu[s, h])), repr(float(self.sigma[s, h]))])

    @classmethod
    def from_csv(cls, path, kind: str, station_ids, n_hours: int) -> "Stage1Archive":
        path = Path(path)
        if not path.exists():
            raise DataError(f"missing stage-1 archive: {path}")
        arch = cls.empty(kind, station_ids, n_hours)
        row = {s: i for i, s in enumerate(arch.station_ids)}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["station_id", "hour_index", "mu", "sigma"]:
                raise DataError(f"{path}: unexpected archive header {reader.fieldnames}")
            for rec in reader:
                s = row.get(rec["station_id"])
                if s is None:
                    raise DataError(f"{path}: unknown station {rec['station_id']}")
                arch.append(s, [int(rec["hour_index"])], [float(rec["mu"])], [float(rec["sigma"])])
        return arch


@dataclass(frozen=True)
class VariationSignal:
    station: str
    quarter: int
    delta_pickup: float
    delta_dropoff: float


def variation_signals(quarter_counts: np.ndarray, archive: Stage1Archive) -> np.ndarray:
    """``y_q - mu_parent(q) / 4`` for every (station, quarter); NaN marks an uncovered parent hour."""
    y = np.asarray(quarter_counts, dtype=np.float64)
    T = y.shape[1]
    if archive.mu.shape[1] * 4 < T:
        raise DataError("archive is shorter than the quarter series")
    parent = np.arange(T) // 4
    return y - archive.mu[:, parent] / 4.0


def signal_records(station_ids, delta_pickup, delta_dropoff) -> list[VariationSignal]:
    out = []
    for s, sid in enumerate(station_ids):
        ok = np.flatnonzero(np.isfinite(delta_pickup[s]) & np.isfinite(delta_dropoff[s]))
        out.extend(VariationSignal(sid, int(q), float(delta_pickup[s, q]), float(delta_dropoff[s, q])) for q in ok)
    return out


def write_signals_csv(path, station_ids, delta_pickup, delta_dropoff) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "quarter_index", "delta_pickup", "delta_dropoff"])
        for rec in signal_records(station_ids, delta_pickup, delta_dropoff):
            w.writerow([rec.station, rec.quarter, repr(rec.delta_pickup), repr(rec.delta_dropoff)])


# ---------------------------------------------------------------------------
# shared helpers


@dataclass
class StageFit:
    stage: int
    kind: str
    model: tf.TSTModel
    norm: NormStats
    history: list[float] = field(default_factory=list)


def _rows_for(model: tf.TSTModel, station_ids, zero_shot: bool = True) -> np.ndarray:
    return model.station_rows(station_ids, zero_shot=zero_shot)


def _select_stations(frame: FeatureFrame, rows) -> FeatureFrame:
    rows = np.asarray(rows, dtype=np.int64)
    return replace(
        frame, station_ids=[frame.station_ids[i] for i in rows], static=frame.static[rows], local=frame.local[rows]
    )


def _fit_indices(data: DatasetBundle, fit_stations) -> np.ndarray:
    if fit_stations is None:
        return np.arange(len(data.stations))
    idx = data.station_index(list(fit_stations))
    if len(idx) == 0:
        raise ConfigError("no stations to fit on")
    return idx


def _new_model(frame: FeatureFrame, data: DatasetBundle, fit_idx, lookback: int, tcfg: tf.TrainConfig,
               cfg: PipelineConfig, seed: int, n_local: int) -> tf.TSTModel:
    ecfg = tf.EmbedConfig(
        n_stations=len(fit_idx), n_static=frame.static.shape[1], n_global=frame.glob.shape[1], n_local=n_local,
        station_dim=cfg.station_dim, global_dim=cfg.global_dim, model_dim=tcfg.hidden_size, lookback=lookback,
    )
    return tf.TSTModel(ecfg, n_layers=tcfg.n_layers, dropout=tcfg.dropout, seed=seed,
                       station_ids=[data.stations[i].id for i in fit_idx])


def _train(model: tf.TSTModel, ds: tf.WindowDataset, tcfg: tf.TrainConfig, train_end: int, seed: int):
    targets = ds.y[ds.windows[:, 0], ds.windows[:, 1] + 1]
    model.set_head_bias(max(float(targets.mean()), 1e-3), 1.0)
    return tf.train(model, ds, replace(tcfg, seed=seed), train_end=train_end)


# ---------------------------------------------------------------------------
# stage 1


def stage1_frame(data: DatasetBundle, split_h: SplitSpec) -> FeatureFrame:
    """Normalised hourly frame (weather statistics from the training hours only)."""
    frame = assemble_stage1_features(data.stations, data.hourly_grid, data.weather, data.holidays)
    return apply_norm(frame, fit_norm_stats(frame, split_h))


def _stage1_dataset(frame: FeatureFrame, hourly: np.ndarray, rows: np.ndarray, lookback: int, windows) -> tf.WindowDataset:
    S, H = hourly.shape
    return tf.WindowDataset(
        y=hourly, glob=frame.glob, local_past=np.zeros((S, H, 0)), local_ahead=np.zeros((S, H, 0)),
        static=frame.static, station_rows=rows, lookback=lookback, windows=windows,
    )


def _windows(stations, t_lo: int, t_hi: int) -> np.ndarray:
    """All ``(station, t)`` pairs with ``t_lo <= t < t_hi``."""
    ts = np.arange(max(t_lo, 0), t_hi)
    st = np.asarray(stations, dtype=np.int64)
    return np.stack([np.repeat(st, len(ts)), np.tile(ts, len(st))], axis=1)


def stage1_fit(data: DatasetBundle, kind: str, split: SplitSpec, cfg: PipelineConfig, fit_stations=None,
               target_range: tuple[int, int] | None = None) -> StageFit:
    """Fit one global hourly model for ``kind`` on training-split targets.

    ``target_range`` (hours, half-open) narrows the fitted targets inside
    the training split; the blocked signal mode uses it.
    """
    cfg.validate()
    split_h = split.coarsened(4)
    split_h.validate(data.hourly_grid.length)
    frame = stage1_frame(data, split_h)
    fit_idx = _fit_indices(data, fit_stations)
    hourly = to_hourly(data.counts[kind])
    lo, hi = target_range if target_range is not None else (cfg.lookback1, split_h.train_end)
    hi = min(hi, split_h.train_end)
    lo = max(lo, cfg.lookback1)
    if hi <= lo:
        raise ConfigError("training split is shorter than the stage-1 look-back")
    seed = _derived_seed(cfg.seed, 1, _kind_code(kind), lo, hi)
    model = _new_model(frame, data, fit_idx, cfg.lookback1, cfg.stage1, cfg, seed, n_local=0)
    rows = _rows_for(model, data.station_ids)
    ds = _stage1_dataset(frame, hourly, rows, cfg.lookback1, _windows(fit_idx, lo - 1, hi - 1))
    result = _train(model, ds, cfg.stage1, split_h.train_end, seed)
    model.norm_stats = frame.norm.to_arrays("")
    return StageFit(1, kind, model, frame.norm, result.history)


def stage1_forecast_rolling(fit: StageFit, data: DatasetBundle, hours: tuple[int, int] | None = None,
                            stations=None, cfg: PipelineConfig | None = None, zero_shot: bool = True,
                            archive: Stage1Archive | None = None) -> Stage1Archive:
    """One-step forecasts for every hour in ``hours`` (half-open target range).

    The forecast for hour ``h + 1`` sees hourly counts up to ``h`` only and
    is stored under ``h + 1``. Stations default to the whole bundle.
    """
    cfg = cfg or PipelineConfig()
    model = fit.model
    V = model.cfg.lookback
    H = data.hourly_grid.length
    lo, hi = hours if hours is not None else (V, H)
    lo = max(lo, V)
    hi = min(hi, H)
    norm = NormStats.from_arrays(model.norm_stats, "") if model.norm_stats else fit.norm
    frame = apply_norm(assemble_stage1_features(data.stations, data.hourly_grid, data.weather, data.holidays), norm)
    idx = np.arange(len(data.stations)) if stations is None else data.station_index(list(stations))
    rows = _rows_for(model, data.station_ids, zero_shot=True)
    if not zero_shot and np.any(rows[idx] < 0):
        unseen = [data.stations[i].id for i in idx if rows[i] < 0]
        raise KeyError(f"stations {unseen} were not seen in training; enable zero-shot substitution")
    if archive is None:
        archive = Stage1Archive.empty(fit.kind, data.station_ids, H)
    if hi <= lo:
        return archive
    hourly = to_hourly(data.counts[fit.kind])
    win = _windows(idx, lo - 1, hi - 1)
    ds = _stage1_dataset(frame, hourly, rows, V, win)
    mu, r = model.predict_params(ds.batch(np.arange(len(ds))))
    targets = win[:, 1] + 1
    keys = [(1, _kind_code(fit.kind), s, h) for s, h in zip(win[:, 0], targets)]
    fc = tf.draw_forecasts(mu, r, keys, cfg.n_samples, cfg.seed)
    sigma = fc.sample_std()
    sigma_analytic = np.sqrt(mu + mu * mu / r)
    for s in idx:
        sel = win[:, 0] == s
        archive.append(int(s), targets[sel], mu[sel], sigma[sel], sigma_analytic[sel])
    return archive


def build_archives(data: DatasetBundle, split: SplitSpec, cfg: PipelineConfig, fit_stations=None,
                   kinds=KINDS) -> tuple[dict[str, Stage1Archive], dict[str, StageFit]]:
    """Stage-1 models and rolling archives for every kind over the whole grid.

    ``in_sample``: one model per kind, fit on the training split, forecasts
    every hour. ``blocked``: the training split is cut in two halves; each
    half is forecast by a model fit on the other half only, and the test
    period by the full-split model.
    """
    cfg.validate()
    archives, fits = {}, {}
    H = data.hourly_grid.length
    train_h = split.train_end // 4
    for kind in kinds:
        full = stage1_fit(data, kind, split, cfg, fit_stations)
        fits[kind] = full
        if cfg.signal_mode == "in_sample":
            archives[kind] = stage1_forecast_rolling(full, data, (cfg.lookback1, H), cfg=cfg)
            continue
        mid = (cfg.lookback1 + train_h) // 2
        if mid - cfg.lookback1 < 2 or train_h - mid < cfg.lookback1 + 2:
            raise ConfigError("training split too short for the blocked signal mode")
        first = stage1_fit(data, kind, split, cfg, fit_stations, target_range=(cfg.lookback1, mid))
        second = stage1_fit(data, kind, split, cfg, fit_stations, target_range=(mid + cfg.lookback1, train_h))
        arch = stage1_forecast_rolling(second, data, (cfg.lookback1, mid), cfg=cfg)
        arch = stage1_forecast_rolling(first, data, (mid, train_h), cfg=cfg, archive=arch)
        archives[kind] = stage1_forecast_rolling(full, data, (train_h, H), cfg=cfg, archive=arch)
    return archives, fits


# ---------------------------------------------------------------------------
# stage 2


@dataclass
class Stage2Inputs:
    """Un-normalised quarter-hour frame plus the raw ingredients behind it."""

    frame: FeatureFrame
    target: str
    delta: dict[str, np.ndarray]
    metro_dev: np.ndarray


def stage2_inputs(data: DatasetBundle, archives: dict[str, Stage1Archive], target: str, split: SplitSpec,
                  include_holiday: bool = False) -> Stage2Inputs:
    missing = [k for k in KINDS if k not in archives]
    if missing:
        raise ConfigError(f"stage 2 needs the stage-1 archive for {missing} (variation signals for both kinds)")
    if target not in KINDS:
        raise ConfigError(f"unknown target kind {target!r}")
    delta = {k: variation_signals(data.counts[k], archives[k]) for k in KINDS}
    grid = data.grid
    prof_in = seasonal_profile(data.metro_in, grid, split) if len(data.metro_stations) else None
    prof_out = seasonal_profile(data.metro_out, grid, split) if len(data.metro_stations) else None
    if prof_in is not None:
        dev_in, dev_out = metro_deviation_matrix(
            data.metro_in, data.metro_out, data.metro_ids, data.links(), prof_in, prof_out, grid
        )
    else:
        dev_in = dev_out = np.zeros((len(data.stations), grid.length))
    # bike pickups pair with metro exits, drop-offs with metro entries
    metro_dev = dev_out if target == "pickup" else dev_in
    arch = archives[target]
    frame = assemble_stage2_features(
        data.stations, grid, arch.mu, arch.sigma, delta["pickup"], delta["dropoff"], metro_dev,
        holidays=data.holidays, include_holiday=include_holiday,
    )
    return Stage2Inputs(frame, target, delta, metro_dev)


def _valid_windows(frame: FeatureFrame, lookback: int) -> np.ndarray:
    """``ok[s, t]`` is True when the window ending at ``t`` has no gap markers."""
    past, ahead = frame.local_split()
    bad_p = np.any(~np.isfinite(past), axis=-1).astype(np.int64)
    bad_a = np.any(~np.isfinite(ahead), axis=-1).astype(np.int64)
    S, T = bad_p.shape
    cp = np.concatenate([np.zeros((S, 1), dtype=np.int64), np.cumsum(bad_p, axis=1)], axis=1)
    ca = np.concatenate([np.zeros((S, 1), dtype=np.int64), np.cumsum(bad_a, axis=1)], axis=1)
    ok = np.zeros((S, T), dtype=bool)
    t = np.arange(lookback - 1, T - 1)
    ok[:, t] = ((cp[:, t + 1] - cp[:, t + 1 - lookback]) == 0) & ((ca[:, t + 2] - ca[:, t + 2 - lookback]) == 0)
    return ok


def _stage2_dataset(frame: FeatureFrame, y: np.ndarray, rows, lookback: int, windows) -> tf.WindowDataset:
    past, ahead = frame.local_split()
    return tf.WindowDataset(
        y=y, glob=frame.glob, local_past=np.nan_to_num(past), local_ahead=np.nan_to_num(ahead),
        static=frame.static, station_rows=rows, lookback=lookback, windows=windows,
    )


def stage2_fit(data: DatasetBundle, inputs: Stage2Inputs, split: SplitSpec, cfg: PipelineConfig,
               fit_stations=None) -> StageFit:
    """Fit the quarter-hour model for ``inputs.target``.

    Normalisation statistics come from the fitted stations over the
    training split. Windows touching a gap marker are excluded.
    """
    cfg.validate()
    split.validate(data.grid.length)
    fit_idx = _fit_indices(data, fit_stations)
    norm = fit_norm_stats(_select_stations(inputs.frame, fit_idx), split)
    frame = apply_norm(inputs.frame, norm)
    seed = _derived_seed(cfg.seed, 2, _kind_code(inputs.target))
    n_local = len(frame.local_names)
    model = _new_model(frame, data, fit_idx, cfg.lookback2, cfg.stage2, cfg, seed, n_local=n_local)
    rows = _rows_for(model, data.station_ids)
    ok = _valid_windows(frame, cfg.lookback2)
    ok[:, split.train_end - 1:] = False
    mask = np.zeros(len(data.stations), dtype=bool)
    mask[fit_idx] = True
    ok &= mask[:, None]
    windows = np.argwhere(ok)
    if len(windows) == 0:
        raise DataError("no gap-free stage-2 training windows; is the stage-1 archive empty?")
    y = data.counts[inputs.target]
    ds = _stage2_dataset(frame, y, rows, cfg.lookback2, windows)
    result = _train(model, ds, cfg.stage2, split.train_end, seed)
    model.norm_stats = norm.to_arrays("")
    return StageFit(2, inputs.target, model, norm, result.history)


@dataclass
class QuarterForecasts:
    """Stage-2 (or baseline) forecasts, one row per (station, quarter)."""

    station_ids: list[str]
    station_index: np.ndarray
    quarter: np.ndarray
    forecasts: tf.ForecastBatch

    def __len__(self):
        return len(self.quarter)

    FIELDS = ("station_id", "quarter_index", "mu", "r", "median", "p05", "p95")

    def to_csv(self, path) -> None:
        f = self.forecasts
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.FIELDS)
            for i in range(len(self)):
                w.writerow([self.station_ids[i], int(self.quarter[i]), repr(float(f.mu[i])), repr(float(f.r[i])),
                            repr(float(f.median[i])), repr(float(f.p05[i])), repr(float(f.p95[i]))])


@dataclass
class ForecastTable:
    """Forecast CSV contents read back without samples."""

    station_ids: list[str]
    quarter: np.ndarray
    mu: np.ndarray
    r: np.ndarray
    median: np.ndarray
    p05: np.ndarray
    p95: np.ndarray


def read_forecast_csv(path) -> ForecastTable:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing forecast file: {path}")
    cols = {k: [] for k in QuarterForecasts.FIELDS}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != QuarterForecasts.FIELDS:
            raise DataError(f"{path}: forecast header must be {','.join(QuarterForecasts.FIELDS)}")
        for n, row in enumerate(reader, 2):
            if len(row) != len(QuarterForecasts.FIELDS):
                raise DataError(f"{path}:{n}: expected {len(QuarterForecasts.FIELDS)} fields")
            try:
                cols["station_id"].append(row[0])
                cols["quarter_index"].append(int(row[1]))
                for k, v in zip(QuarterForecasts.FIELDS[2:], row[2:]):
                    cols[k].append(float(v))
            except ValueError as exc:
                raise DataError(f"{path}:{n}: {exc}") from exc
    mu, r = np.array(cols["mu"]), np.array(cols["r"])
    if np.any(~(mu > 0)) or np.any(~(r > 0)):
        raise DataError(f"{path}: mu and r must be positive")
    return ForecastTable(cols["station_id"], np.array(cols["quarter_index"], dtype=np.int64), mu, r,
                         np.array(cols["median"]), np.array(cols["p05"]), np.array(cols["p95"]))


def stage2_normalised_frame(fit: StageFit, inputs: Stage2Inputs) -> FeatureFrame:
    norm = NormStats.from_arrays(fit.model.norm_stats, "") if fit.model.norm_stats else fit.norm
    return apply_norm(inputs.frame, norm)


def stage2_forecast_range(fit: StageFit, data: DatasetBundle, inputs: Stage2Inputs, quarters: tuple[int, int],
                          stations=None, cfg: PipelineConfig | None = None, zero_shot: bool = False) -> QuarterForecasts:
    """Forecast quarters ``[lo, hi)`` one step ahead, from windows ending at ``q - 1``."""
    cfg = cfg or PipelineConfig()
    model = fit.model
    V = model.cfg.lookback
    lo, hi = quarters
    if lo < V or hi > data.grid.length or hi <= lo:
        raise ConfigError(f"quarter range [{lo}, {hi}) is not forecastable with look-back {V}")
    frame = stage2_normalised_frame(fit, inputs)
    ids = data.station_ids if stations is None else list(stations)
    idx = data.station_index(ids)
    rows = _rows_for(model, data.station_ids, zero_shot=True)
    if not zero_shot:
        unseen = [data.stations[i].id for i in idx if rows[i] < 0]
        if unseen:
            raise KeyError(f"stations {unseen} were not seen in training; enable zero-shot substitution")
    ok = _valid_windows(frame, V)
    win = _windows(idx, lo - 1, hi - 1)
    gaps = ~ok[win[:, 0], win[:, 1]]
    if np.any(gaps):
        s, t = win[np.argmax(gaps)]
        raise DataError(f"stage-1 archive gap inside the window for station {data.stations[s].id} at quarter {t + 1}")
    ds = _stage2_dataset(frame, data.counts[inputs.target], rows, V, win)
    mu, r = model.predict_params(ds.batch(np.arange(len(ds))))
    q = win[:, 1] + 1
    keys = [(2, _kind_code(inputs.target), s, t) for s, t in zip(win[:, 0], q)]
    fc = tf.draw_forecasts(mu, r, keys, cfg.n_samples, cfg.seed)
    return QuarterForecasts([data.stations[s].id for s in win[:, 0]], win[:, 0], q, fc)


def stage2_forecast(fit: StageFit, data: DatasetBundle, inputs: Stage2Inputs, station: str, t: int,
                    cfg: PipelineConfig | None = None, zero_shot: bool = False) -> tf.ForecastDistribution:
    """Distribution for quarter ``t + 1`` using information up to ``t``."""
    out = stage2_forecast_range(fit, data, inputs, (t + 1, t + 2), [station], cfg, zero_shot)
    return out.forecasts.item(0)


def redraw_forecasts(table: ForecastTable, data: DatasetBundle, target: str, n_samples: int = 100,
                     seed: int = 0) -> tf.ForecastBatch:
    """Rebuild the sample matrix of a forecast file from its (mu, r) and keys."""
    idx = data.station_index(table.station_ids)
    keys = [(2, _kind_code(target), s, q) for s, q in zip(idx, table.quarter)]
    return tf.draw_forecasts(table.mu, table.r, keys, n_samples, seed)


# ---------------------------------------------------------------------------
# zero-shot and baselines


def zero_shot_embed(model: tf.TSTModel, station: StationMeta | None = None, max_capacity: float | None = None) -> np.ndarray:
    """Station representation for an unseen station: mean embedding plus its own capacity term."""
    h = model.mean_embedding()
    if station is not None and model.cfg.n_static:
        cap = station.capacity / (max_capacity if max_capacity is not None else station.capacity)
        h = h + np.array([cap]) @ model.params["static_w"]
    return h


def baseline_historical_average(profile, dow: int, hour: int, quarter: int = 0) -> np.ndarray:
    """Training-split seasonal mean for one key (falls back as the profile does)."""
    return profile.lookup(dow, hour, quarter)


def baseline_myopic(last_observation):
    return last_observation


def baseline_hourly_split(archive: Stage1Archive, station: int, quarter: int) -> float:
    mu = archive.mu[station, quarter // 4]
    if not np.isfinite(mu):
        raise DataError(f"no stage-1 forecast for the parent hour of quarter {quarter}")
    return float(mu) / 4.0


def historical_average_forecasts(counts: np.ndarray, data: DatasetBundle, split: SplitSpec, station_idx, quarters) -> np.ndarray:
    prof = seasonal_profile(np.asarray(counts)[np.unique(station_idx)], data.grid, split)
    table = prof.expected(data.grid)
    pos = np.searchsorted(np.unique(station_idx), station_idx)
    return table[pos, quarters]


def myopic_forecasts(counts: np.ndarray, station_idx, quarters) -> np.ndarray:
    quarters = np.asarray(quarters)
    if np.any(quarters < 1):
        raise ConfigError("the myopic forecast needs a previous quarter")
    return np.asarray(counts, dtype=np.float64)[station_idx, quarters - 1]


def hourly_split_forecasts(archive: Stage1Archive, station_idx, quarters) -> np.ndarray:
    out = archive.mu[station_idx, np.asarray(quarters) // 4] / 4.0
    if np.any(~np.isfinite(out)):
        raise DataError("stage-1 archive does not cover every parent hour requested")
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_stage(path, fit: StageFit, tcfg: tf.TrainConfig | None = None, extra: dict | None = None) -> None:
    meta = {"stage": fit.stage, "kind": fit.kind, "history": fit.history, **(extra or {})}
    tf.save_checkpoint(path, fit.model, tcfg, meta)


def load_stage(path, stage: int | None = None, kind: str | None = None) -> StageFit:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint: {path}")
    model, _, extra = tf.load_checkpoint(path)
    if stage is not None and extra.get("stage") != stage:
        raise ConfigError(f"{path} holds a stage-{extra.get('stage')} model, expected stage {stage}")
    if kind is not None and extra.get("kind") != kind:
        raise ConfigError(f"{path} holds a {extra.get('kind')} model, expected {kind}")
    norm = NormStats.from_arrays(model.norm_stats, "")
    return StageFit(extra["stage"], extra["kind"], model, norm, list(extra.get("history", [])))


# ---------------------------------------------------------------------------
# end to end


@dataclass
class PipelineRun:
    cfg: PipelineConfig
    split: SplitSpec
    archives: dict[str, Stage1Archive]
    stage1: dict[str, StageFit]
    inputs: Stage2Inputs
    stage2: StageFit
    forecasts: QuarterForecasts
    baselines: dict[str, np.ndarray]


def run_pipeline(data: DatasetBundle, split: SplitSpec, cfg: PipelineConfig, fit_stations=None,
                 eval_stations=None, zero_shot: bool = False) -> PipelineRun:
    """Stage 1 for both kinds, Stage 2 for ``cfg.target``, test forecasts and baselines."""
    cfg.validate()
    split.validate(data.grid.length)
    if split.train_end % 4 or split.test_end % 4:
        raise ConfigError("split boundaries must fall on whole hours")
    archives, fits = build_archives(data, split, cfg, fit_stations)
    inputs = stage2_inputs(data, archives, cfg.target, split, cfg.stage2_holiday)
    s2 = stage2_fit(data, inputs, split, cfg, fit_stations)
    fc = stage2_forecast_range(s2, data, inputs, (split.train_end, split.test_end), eval_stations, cfg, zero_shot)
    counts = data.counts[cfg.target]
    baselines = {
        "historical_average": historical_average_forecasts(counts, data, split, fc.station_index, fc.quarter),
        "myopic": myopic_forecasts(counts, fc.station_index, fc.quarter),
        "hourly_split": hourly_split_forecasts(archives[cfg.target], fc.station_index, fc.quarter),
    }
    return PipelineRun(cfg, split, archives, fits, inputs, s2, fc, baselines)


def score_run(run: PipelineRun, data: DatasetBundle) -> dict:
    """Score rows for the model and each baseline on the run's test forecasts."""
    fc = run.forecasts
    y = data.counts[run.cfg.target][fc.station_index, fc.quarter]
    out = {"tstar": score_forecasts(fc.station_ids, fc.quarter, y, samples=fc.forecasts.samples)}
    for name, point in run.baselines.items():
        out[name] = score_forecasts(fc.station_ids, fc.quarter, y, point=point)
    return out
