"""Point and probabilistic scoring, report aggregation and backtest harnesses."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError

ALPHA = 0.1
METRICS = ("MAE", "RMSE", "MCRPS", "MIS")


def mae(actuals, points) -> float:
    y, p = np.asarray(actuals, dtype=np.float64), np.asarray(points, dtype=np.float64)
    return float(np.mean(np.abs(y - p)))


def rmse(actuals, points) -> float:
    y, p = np.asarray(actuals, dtype=np.float64), np.asarray(points, dtype=np.float64)
    return float(np.sqrt(np.mean((y - p) ** 2)))


def crps_empirical(samples, y) -> float:
    """CRPS of the empirical distribution of ``samples`` at observation ``y``.

    Uses ``mean|x - y| - sum_ij |x_i - x_j| / (2 N^2)``, evaluated in
    O(N log N) through the sorted-sample identity for the pairwise term.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64).ravel())
    n = x.size
    if n == 0:
        raise ConfigError("CRPS needs at least one sample")
    first = np.abs(x - y).mean()
    # sum_{i<j} (x_j - x_i) = sum_k (2k - n + 1) x_k for sorted x, k = 0..n-1
    pair = 2.0 * np.dot(2.0 * np.arange(n) - n + 1.0, x)
    return float(first - pair / (2.0 * n * n))


def crps_rows(samples: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row-wise ``crps_empirical`` for a ``(B, N)`` sample matrix."""
    x = np.sort(np.asarray(samples, dtype=np.float64), axis=1)
    y = np.asarray(y, dtype=np.float64)
    n = x.shape[1]
    first = np.abs(x - y[:, None]).mean(axis=1)
    pair = 2.0 * (x @ (2.0 * np.arange(n) - n + 1.0))
    return first - pair / (2.0 * n * n)


def interval_score(lower, upper, y, alpha: float = ALPHA):
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    if np.any(lower > upper):
        raise ConfigError("interval lower bound exceeds upper bound")
    score = (upper - lower) + (2.0 / alpha) * (lower - y) * (y < lower) + (2.0 / alpha) * (y - upper) * (y > upper)
    return float(score) if score.ndim == 0 else score


# ---------------------------------------------------------------------------
# score rows and reports


@dataclass
class ScoreRows:
    """Column-oriented per-forecast scores (one entry per station and quarter)."""

    station: np.ndarray
    quarter: np.ndarray
    y: np.ndarray
    point: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    mae_term: np.ndarray
    se_term: np.ndarray
    crps: np.ndarray
    is_term: np.ndarray

    def __len__(self):
        return len(self.y)

    def select(self, mask) -> "ScoreRows":
        return ScoreRows(**{k: getattr(self, k)[mask] for k in self.__dataclass_fields__})

    @classmethod
    def concat(cls, parts: Sequence["ScoreRows"]) -> "ScoreRows":
        return cls(**{k: np.concatenate([getattr(p, k) for p in parts]) for k in cls.__dataclass_fields__})


def score_forecasts(station, quarter, y, samples=None, point=None, lower=None, upper=None,
                    alpha: float = ALPHA) -> ScoreRows:
    """Score sample-based forecasts, or point forecasts treated as point masses.

    With ``samples`` the point is the sample median and the interval is the
    nearest-rank (5%, 95%) pair unless given explicitly.
    """
    y = np.asarray(y, dtype=np.float64)
    if samples is not None:
        samples = np.sort(np.asarray(samples, dtype=np.float64), axis=1)
        n = samples.shape[1]
        if point is None:
            point = np.median(samples, axis=1)
        if lower is None:
            lower = samples[:, max(math.ceil(alpha / 2 * n), 1) - 1]
        if upper is None:
            upper = samples[:, max(math.ceil((1 - alpha / 2) * n), 1) - 1]
        crps = crps_rows(samples, y)
    else:
        if point is None:
            raise ConfigError("need samples or point forecasts")
        point = np.asarray(point, dtype=np.float64)
        lower = point if lower is None else lower
        upper = point if upper is None else upper
        crps = np.abs(point - y)
    point = np.asarray(point, dtype=np.float64)
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    return ScoreRows(
        station=np.asarray(station), quarter=np.asarray(quarter, dtype=np.int64), y=y, point=point,
        lower=lower, upper=upper, mae_term=np.abs(y - point), se_term=(y - point) ** 2, crps=crps,
        is_term=np.asarray(interval_score(lower, upper, y, alpha), dtype=np.float64).reshape(-1),
    )


def _summary(rows: ScoreRows) -> dict:
    if len(rows) == 0:
        return {"n": 0, **{m: float("nan") for m in METRICS}}
    return {
        "n": len(rows),
        "MAE": float(rows.mae_term.mean()),
        "RMSE": float(math.sqrt(rows.se_term.mean())),
        "MCRPS": float(rows.crps.mean()),
        "MIS": float(rows.is_term.mean()),
    }


def _grouped(rows: ScoreRows, keys: np.ndarray) -> dict:
    out = {}
    uniq, inv = np.unique(keys, return_inverse=True)
    counts = np.bincount(inv)
    for name, col in (("MAE", rows.mae_term), ("SE", rows.se_term), ("MCRPS", rows.crps), ("MIS", rows.is_term)):
        out[name] = np.bincount(inv, weights=col) / counts
    per = {}
    for i, k in enumerate(uniq.tolist()):
        per[k] = {
            "n": int(counts[i]), "MAE": float(out["MAE"][i]), "RMSE": float(math.sqrt(out["SE"][i])),
            "MCRPS": float(out["MCRPS"][i]), "MIS": float(out["MIS"][i]),
        }
    return per


@dataclass
class ScoreReport:
    overall: dict
    per_station: dict
    per_timestep: dict
    per_regime: dict
    spread: dict = field(default_factory=dict)

    def summary_rows(self) -> list[list]:
        rows = [["overall", "all", self.overall["n"], *(self.overall[m] for m in METRICS)]]
        for regime in ("normal", "abnormal"):
            r = self.per_regime[regime]
            rows.append(["regime", regime, r["n"], *(r[m] for m in METRICS)])
        for axis in ("station", "timestep"):
            sd = self.spread.get(axis, {})
            rows.append([f"std_across_{axis}", "all", len(self.per_station if axis == "station" else self.per_timestep),
                         *(sd.get(m, float("nan")) for m in METRICS)])
        for sid in sorted(self.per_station, key=str):
            r = self.per_station[sid]
            rows.append(["station", sid, r["n"], *(r[m] for m in METRICS)])
        return rows


def build_report(rows: ScoreRows, abnormal: np.ndarray | None = None) -> ScoreReport:
    """Aggregate score rows overall, per station, per timestep and per regime.

    Spread entries hold the unweighted standard deviation of the per-station
    and per-timestep metric values.
    """
    if abnormal is None:
        abnormal = np.zeros(len(rows), dtype=bool)
    abnormal = np.asarray(abnormal, dtype=bool)
    per_station = _grouped(rows, rows.station) if len(rows) else {}
    per_timestep = _grouped(rows, rows.quarter) if len(rows) else {}
    spread = {}
    for axis, per in (("station", per_station), ("timestep", per_timestep)):
        if per:
            spread[axis] = {m: float(np.std([v[m] for v in per.values()])) for m in METRICS}
    return ScoreReport(
        overall=_summary(rows),
        per_station=per_station,
        per_timestep=per_timestep,
        per_regime={"normal": _summary(rows.select(~abnormal)), "abnormal": _summary(rows.select(abnormal))},
        spread=spread,
    )


def abnormal_mask(counts: np.ndarray, train_end: int, z: float = 3.0) -> np.ndarray:
    """Per-(station, interval) flag for z-scores >= ``z`` under train-split statistics.

    Stations with zero training variance flag any value above their mean.
    """
    counts = np.asarray(counts, dtype=np.float64)
    train = counts[:, :train_end]
    mean = train.mean(axis=1, keepdims=True)
    std = train.std(axis=1, keepdims=True)
    dev = counts - mean
    with np.errstate(divide="ignore", invalid="ignore"):
        zs = np.where(std > 0, dev / np.where(std > 0, std, 1.0), np.where(dev > 0, np.inf, 0.0))
    return zs >= z


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(report: ScoreReport, rows: ScoreRows, out_dir, prefix: str = "report") -> dict[str, Path]:
    """Write per-row, summary and per-timestep CSV files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "rows": out / f"{prefix}.csv",
        "summary": out / f"{prefix}_summary.csv",
        "temporal": out / f"{prefix}_temporal.csv",
    }
    with open(paths["rows"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "quarter_index", "y", "point", "p05", "p95", "abs_error", "sq_error", "crps", "interval_score"])
        for i in range(len(rows)):
            w.writerow([rows.station[i], int(rows.quarter[i]), *(_fmt(float(getattr(rows, c)[i])) for c in
                        ("y", "point", "lower", "upper", "mae_term", "se_term", "crps", "is_term"))])
    with open(paths["summary"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scope", "key", "n", *METRICS])
        for r in report.summary_rows():
            w.writerow([_fmt(v) for v in r])
    with open(paths["temporal"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quarter_index", "n", *METRICS])
        for q in sorted(report.per_timestep):
            r = report.per_timestep[q]
            w.writerow([q, r["n"], *(_fmt(r[m]) for m in METRICS)])
    return paths


# ---------------------------------------------------------------------------
# backtest folds


@dataclass(frozen=True)
class Fold:
    index: int
    train_start: int
    train_end: int
    val_start: int
    val_end: int
    train_weeks: tuple[int, int]
    val_weeks: tuple[int, int]

    @property
    def label(self) -> str:
        (a, b), (c, d) = self.train_weeks, self.val_weeks
        return f"w{a}-w{b} / w{c}-w{d}"

    def validate(self) -> None:
        if not (0 <= self.train_start < self.train_end <= self.val_start < self.val_end):
            raise ConfigError(f"fold {self.index}: validation must follow training without overlap")


def _fold(i, tr0, tr1, va0, va1, per_week) -> Fold:
    f = Fold(i, tr0 * per_week, tr1 * per_week, va0 * per_week, va1 * per_week,
             (tr0 + 1, tr1), (va0 + 1, va1))
    f.validate()
    return f


def rolling_origin_folds(n_intervals: int, per_week: int, initial_weeks: int = 4, val_weeks: int = 2,
                         step_weeks: int = 2, n_folds: int | None = None) -> list[Fold]:
    """Expanding-window folds: train w1..w(k), validate on the next ``val_weeks``."""
    if min(initial_weeks, val_weeks, step_weeks) < 1:
        raise ConfigError("fold sizes must be positive")
    total = n_intervals // per_week
    if initial_weeks + val_weeks > total:
        raise ConfigError("data too short for a single fold")
    folds = []
    k = initial_weeks
    while k + val_weeks <= total and (n_folds is None or len(folds) < n_folds):
        folds.append(_fold(len(folds), 0, k, k, k + val_weeks, per_week))
        k += step_weeks
    return folds


def sliding_window_folds(n_intervals: int, per_week: int, window_weeks: int = 8, val_weeks: int = 2,
                         step_weeks: int = 1, n_folds: int | None = None) -> list[Fold]:
    """Fixed-length training windows advanced by ``step_weeks``."""
    if min(window_weeks, val_weeks, step_weeks) < 1:
        raise ConfigError("fold sizes must be positive")
    total = n_intervals // per_week
    if window_weeks + val_weeks > total:
        raise ConfigError("training window plus validation is longer than the data")
    folds = []
    s = 0
    while s + window_weeks + val_weeks <= total and (n_folds is None or len(folds) < n_folds):
        folds.append(_fold(len(folds), s, s + window_weeks, s + window_weeks, s + window_weeks + val_weeks, per_week))
        s += step_weeks
    return folds


def check_folds(folds: Sequence[Fold]) -> None:
    for f in folds:
        f.validate()


@dataclass
class FoldResult:
    fold: Fold
    report: ScoreReport
    rows: ScoreRows


def run_cv(folds: Sequence[Fold], fit_and_score: Callable[[Fold], ScoreRows],
           abnormal: Callable[[Fold, ScoreRows], np.ndarray] | None = None) -> list[FoldResult]:
    """Retrain and score once per fold.

    ``fit_and_score`` must train only on ``[train_start, train_end)`` and
    return rows for quarters in ``[val_start, val_end)``; both are checked.
    """
    check_folds(folds)
    results = []
    for fold in folds:
        rows = fit_and_score(fold)
        if len(rows) and (rows.quarter.min() < fold.val_start or rows.quarter.max() >= fold.val_end):
            raise ConfigError(f"fold {fold.index}: scored rows fall outside the validation window")
        mask = abnormal(fold, rows) if abnormal is not None else None
        results.append(FoldResult(fold, build_report(rows, mask), rows))
    return results


def rolling_origin_cv(fit_and_score, n_intervals: int, per_week: int, **kw) -> list[FoldResult]:
    return run_cv(rolling_origin_folds(n_intervals, per_week, **kw), fit_and_score)


def sliding_window_cv(fit_and_score, n_intervals: int, per_week: int, **kw) -> list[FoldResult]:
    return run_cv(sliding_window_folds(n_intervals, per_week, **kw), fit_and_score)
