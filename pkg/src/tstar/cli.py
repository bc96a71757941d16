"""Command-line entry point: ``tstar {synth,ingest,train,forecast,evaluate}``.

Settings come from a flat ``key = value`` file, then ``TSTAR_SEED`` /
``TSTAR_JOBS`` from the environment, then command-line flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from datetime import date, datetime, timedelta
from pathlib import Path

import numpy as np

from . import bundle as bundle_mod
from . import evaluation as ev
from . import pipeline as pl
from . import synth
from .errors import ConfigError, DataError, TStarError
from .ingest import parse_stations
from .timegrid import KINDS, SplitSpec
from .transformer import TrainConfig

logger = logging.getLogger("tstar")

INPUT_FILES = {
    "trips": "trips.csv",
    "metro": "metro.csv",
    "weather": "weather.csv",
    "stations": "stations.csv",
    "metro_stations": "metro_stations.csv",
    "holidays": "holidays.txt",
}
TRAIN_KEYS = ("epochs", "batch_size", "learning_rate", "dropout", "n_layers", "hidden_size", "steps_per_epoch", "grad_clip")


@dataclass
class RunConfig:
    data_dir: str = "data"
    trips: str = ""
    metro: str = ""
    weather: str = ""
    stations: str = ""
    metro_stations: str = ""
    holidays: str = ""
    out_dir: str = "run"
    start: str = "2022-10-01"
    days: int = 90
    train_end: str = ""
    test_end: str = ""
    seed: int = 0
    jobs: int = 1
    target: str = "pickup"
    lookback1: int = 24
    lookback2: int = 24
    horizon: int = 1
    n_samples: int = 100
    alpha: float = 0.1
    proximity_m: float = 300.0
    weather_max_gap: int = 3
    signal_mode: str = "in_sample"
    stage2_holiday: bool = False
    station_dim: int = 8
    global_dim: int = 8
    holdout_stations: str = ""
    abnormal_z: float = 3.0
    stage1_epochs: int = 100
    stage1_batch_size: int = 256
    stage1_learning_rate: float = 6e-4
    stage1_dropout: float = 0.1
    stage1_n_layers: int = 1
    stage1_hidden_size: int = 64
    stage1_steps_per_epoch: int = 0
    stage1_grad_clip: float = 5.0
    stage2_epochs: int = 100
    stage2_batch_size: int = 256
    stage2_learning_rate: float = 1e-3
    stage2_dropout: float = 0.1
    stage2_n_layers: int = 3
    stage2_hidden_size: int = 16
    stage2_steps_per_epoch: int = 0
    stage2_grad_clip: float = 5.0
    cv_folds: int = 4
    cv_initial_weeks: int = 4
    cv_val_weeks: int = 2
    cv_step_weeks: int = 2
    cv_window_weeks: int = 8
    cv_slide_weeks: int = 1

    # -- derived -----------------------------------------------------------

    def path(self, key: str) -> Path:
        value = getattr(self, key)
        return Path(value) if value else Path(self.data_dir) / INPUT_FILES[key]

    def input_paths(self) -> dict[str, Path]:
        return {k: self.path(k) for k in INPUT_FILES}

    @property
    def out(self) -> Path:
        return Path(self.out_dir)

    def start_dt(self) -> datetime:
        return _parse_day(self.start, "start")

    def split(self) -> SplitSpec:
        start = self.start_dt()
        train_end = _parse_day(self.train_end, "train_end") if self.train_end else start + timedelta(days=70)
        test_end = _parse_day(self.test_end, "test_end") if self.test_end else start + timedelta(days=self.days)
        q = timedelta(minutes=15)
        spec = SplitSpec((train_end - start) // q, (test_end - start) // q)
        spec.validate(self.days * 96)
        return spec

    def holdout(self) -> list[str]:
        return [s.strip() for s in self.holdout_stations.split(",") if s.strip()]

    def train_config(self, stage: int) -> TrainConfig:
        pre = f"stage{stage}_"
        kw = {k: getattr(self, pre + k) for k in TRAIN_KEYS}
        kw["steps_per_epoch"] = kw["steps_per_epoch"] or None
        kw["grad_clip"] = kw["grad_clip"] or None
        return TrainConfig(seed=self.seed, **kw)

    def pipeline_config(self) -> pl.PipelineConfig:
        cfg = pl.PipelineConfig(
            lookback1=self.lookback1, lookback2=self.lookback2, horizon1=self.horizon, horizon2=self.horizon,
            target=self.target, n_samples=self.n_samples, seed=self.seed, signal_mode=self.signal_mode,
            station_dim=self.station_dim, global_dim=self.global_dim, stage2_holiday=self.stage2_holiday,
            stage1=self.train_config(1), stage2=self.train_config(2),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.days < 1:
            raise ConfigError("days must be positive")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        self.split()
        self.pipeline_config()

    def dump(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_day(text: str, key: str) -> datetime:
    try:
        return datetime.fromisoformat(text.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: not an ISO date: {text!r}") from exc


def _coerce(name: str, kind, raw: str):
    raw = raw.strip()
    try:
        if kind in (bool, "bool"):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc
    return raw


def parse_flat(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides: dict | None = None, env=None) -> RunConfig:
    env = os.environ if env is None else env
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"missing config file: {p}")
        values.update(parse_flat(p.read_text(), str(p)))
    for env_key, key in (("TSTAR_SEED", "seed"), ("TSTAR_JOBS", "jobs")):
        if env.get(env_key):
            values[key] = env[env_key]
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = str(v)
    unknown = sorted(set(values) - set(types))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    cfg = RunConfig(**{k: _coerce(k, types[k], v) for k, v in values.items()})
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# synthetic spec


SYNTH_FLOAT_TUPLES = ("quarter_weights", "level_range")


def load_synth_spec(path=None, seed: int | None = None) -> synth.SynthSpec:
    """Build a ``SynthSpec`` from a flat file; tuple fields are comma-separated."""
    values = {}
    if path:
        if not Path(path).exists():
            raise ConfigError(f"missing spec file: {path}")
        values = parse_flat(Path(path).read_text(), str(path))
    defaults = synth.SynthSpec()
    kw = {}
    for key, raw in values.items():
        if not hasattr(defaults, key) or key == "base_rates":
            raise ConfigError(f"unknown synth spec key {key!r}")
        try:
            if key == "start":
                kw[key] = _parse_day(raw, key)
            elif key == "holidays":
                kw[key] = tuple(date.fromisoformat(d.strip()) for d in raw.split(",") if d.strip())
            elif key in SYNTH_FLOAT_TUPLES:
                kw[key] = tuple(float(x) for x in raw.split(","))
            elif key == "capacity_range":
                kw[key] = tuple(int(x) for x in raw.split(","))
            elif key == "linked_stations":
                kw[key] = int(raw)
            else:
                kw[key] = type(getattr(defaults, key))(raw)
        except ValueError as exc:
            raise ConfigError(f"synth spec {key}: cannot parse {raw!r}") from exc
    if seed is not None:
        kw["seed"] = seed
    spec = synth.SynthSpec(**kw)
    spec.validate()
    return spec


# ---------------------------------------------------------------------------
# commands


def _bundle_path(cfg: RunConfig) -> Path:
    return cfg.out / "bundle.npz"


def _load_bundle(cfg: RunConfig) -> bundle_mod.DatasetBundle:
    p = _bundle_path(cfg)
    if not p.exists():
        raise DataError(f"missing dataset bundle {p}; run 'tstar ingest' first")
    return bundle_mod.DatasetBundle.load(p)


def _fit_stations(cfg: RunConfig, data) -> list[str] | None:
    hold = cfg.holdout()
    if not hold:
        return None
    data.station_index(hold)
    return [s for s in data.station_ids if s not in set(hold)]


def cmd_synth(args, cfg: RunConfig) -> int:
    spec = load_synth_spec(args.spec, seed=args.seed)
    out = Path(args.out or cfg.data_dir)
    data = synth.generate(spec)
    paths = data.write(out)
    np.savez(out / "truth.npz", pickup=data.rates["pickup"], dropoff=data.rates["dropoff"],
             r_true=np.array(spec.r_true), zero_inflation=np.array(spec.zero_inflation))
    print(f"wrote synthetic dataset ({spec.n_stations} stations, {spec.days} days) to {out}")
    for k, p in paths.items():
        print(f"  {k}: {p}")
    return 0


def cmd_ingest(args, cfg: RunConfig) -> int:
    data = bundle_mod.from_csv(cfg.input_paths(), cfg.start_dt(), cfg.days, cfg.proximity_m, cfg.weather_max_gap)
    cfg.out.mkdir(parents=True, exist_ok=True)
    data.save(_bundle_path(cfg))
    (cfg.out / "ingest_report.json").write_text(json.dumps(data.report, indent=2, sort_keys=True) + "\n")
    print(f"bundle: {_bundle_path(cfg)}")
    print(json.dumps(data.report, sort_keys=True))
    return 0


def _archive_path(cfg: RunConfig, kind: str) -> Path:
    return cfg.out / f"stage1_archive_{kind}.csv"


def _load_archives(cfg: RunConfig, data) -> dict:
    archives = {}
    for kind in KINDS:
        p = _archive_path(cfg, kind)
        if not p.exists():
            raise DataError(f"stage 2 depends on the stage-1 archive {p}; run 'tstar train --stage 1' first")
        archives[kind] = pl.Stage1Archive.from_csv(p, kind, data.station_ids, data.hourly_grid.length)
    return archives


def cmd_train(args, cfg: RunConfig) -> int:
    data = _load_bundle(cfg)
    pcfg = cfg.pipeline_config()
    split = cfg.split()
    fit_stations = _fit_stations(cfg, data)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    if args.stage in ("1", "both"):
        archives, fits = pl.build_archives(data, split, pcfg, fit_stations)
        for kind in KINDS:
            pl.save_stage(out / f"stage1_{kind}.npz", fits[kind], pcfg.stage1)
            archives[kind].to_csv(_archive_path(cfg, kind))
            print(f"stage 1 ({kind}): {out / f'stage1_{kind}.npz'}, archive {_archive_path(cfg, kind)}")
        delta = {k: pl.variation_signals(data.counts[k], archives[k]) for k in KINDS}
        pl.write_signals_csv(out / "signals.csv", data.station_ids, delta["pickup"], delta["dropoff"])
        print(f"signals: {out / 'signals.csv'}")
    if args.stage in ("2", "both"):
        archives = _load_archives(cfg, data)
        inputs = pl.stage2_inputs(data, archives, pcfg.target, split, pcfg.stage2_holiday)
        fit = pl.stage2_fit(data, inputs, split, pcfg, fit_stations)
        path = out / f"stage2_{pcfg.target}.npz"
        pl.save_stage(path, fit, pcfg.stage2)
        print(f"stage 2 ({pcfg.target}): {path}")
    return 0


def _forecast_path(cfg: RunConfig) -> Path:
    return cfg.out / f"forecast_{cfg.target}.csv"


def cmd_forecast(args, cfg: RunConfig) -> int:
    data = _load_bundle(cfg)
    pcfg = cfg.pipeline_config()
    split = cfg.split()
    ckpt = cfg.out / f"stage2_{cfg.target}.npz"
    fit = pl.load_stage(ckpt, stage=2, kind=cfg.target)
    archives = _load_archives(cfg, data)
    inputs = pl.stage2_inputs(data, archives, cfg.target, split, pcfg.stage2_holiday)
    seen = list(fit.model.station_ids)
    stations = seen
    zero_shot = False
    if args.zero_shot:
        new = parse_stations(args.zero_shot)
        known = {s.id: s for s in data.stations}
        for s in new:
            if s.id not in known:
                raise DataError(f"zero-shot station {s.id} has no demand history in the bundle")
            if s.capacity != known[s.id].capacity:
                raise DataError(f"zero-shot station {s.id}: capacity differs from the bundle")
        stations = seen + [s.id for s in new if s.id not in set(seen)]
        zero_shot = True
    if args.stations:
        stations = [s.strip() for s in args.stations.split(",") if s.strip()]
    try:
        fc = pl.stage2_forecast_range(fit, data, inputs, (split.train_end, split.test_end), stations, pcfg, zero_shot)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from exc
    path = Path(args.output) if args.output else _forecast_path(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    fc.to_csv(path)
    print(f"forecasts: {path} ({len(fc)} rows)")
    return 0


def _score_table(table, data, cfg: RunConfig, split: SplitSpec) -> tuple[ev.ScoreRows, np.ndarray]:
    fc = pl.redraw_forecasts(table, data, cfg.target, cfg.n_samples, cfg.seed)
    idx = data.station_index(table.station_ids)
    if np.any(table.quarter >= data.grid.length) or np.any(table.quarter < 0):
        raise DataError("forecast quarter index outside the bundle")
    y = data.counts[cfg.target][idx, table.quarter]
    rows = ev.score_forecasts(table.station_ids, table.quarter, y, samples=fc.samples, alpha=cfg.alpha)
    mask = ev.abnormal_mask(data.counts[cfg.target], split.train_end, cfg.abnormal_z)[idx, table.quarter]
    return rows, mask


def _write_baselines(path: Path, reports: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "n", *ev.METRICS])
        for name, rep in reports.items():
            w.writerow([name, rep.overall["n"], *(repr(rep.overall[m]) for m in ev.METRICS)])


def _fold_job(payload):
    """Fit and score one CV fold (module level so worker processes can run it)."""
    cfg, data, fold = payload
    pcfg = cfg.pipeline_config()
    sub = data.window(fold.train_start, fold.val_end)
    split = SplitSpec(fold.train_end - fold.train_start, fold.val_end - fold.train_start)
    fit_stations = _fit_stations(cfg, data)
    run = pl.run_pipeline(sub, split, pcfg, fit_stations, zero_shot=fit_stations is not None)
    rows = pl.score_run(run, sub)
    mask = ev.abnormal_mask(sub.counts[cfg.target], split.train_end, cfg.abnormal_z)
    fc = run.forecasts
    out = {}
    for name, r in rows.items():
        r.quarter = r.quarter + fold.train_start
        out[name] = (r, mask[fc.station_index, fc.quarter])
    return out


def cmd_evaluate(args, cfg: RunConfig) -> int:
    data = _load_bundle(cfg)
    split = cfg.split()
    out = cfg.out
    if args.cv == "none":
        table = pl.read_forecast_csv(args.forecasts or _forecast_path(cfg))
        rows, mask = _score_table(table, data, cfg, split)
        report = ev.build_report(rows, mask)
        ev.write_report(report, rows, out)
        idx = data.station_index(table.station_ids)
        counts = data.counts[cfg.target]
        baselines = {"tstar": report}
        points = {
            "historical_average": pl.historical_average_forecasts(counts, data, split, idx, table.quarter),
            "myopic": pl.myopic_forecasts(counts, idx, table.quarter),
        }
        arch_path = _archive_path(cfg, cfg.target)
        if arch_path.exists():
            arch = pl.Stage1Archive.from_csv(arch_path, cfg.target, data.station_ids, data.hourly_grid.length)
            points["hourly_split"] = pl.hourly_split_forecasts(arch, idx, table.quarter)
        y = counts[idx, table.quarter]
        for name, p in points.items():
            baselines[name] = ev.build_report(ev.score_forecasts(table.station_ids, table.quarter, y, point=p,
                                                                 alpha=cfg.alpha), mask)
        _write_baselines(out / "report_baselines.csv", baselines)
        o = report.overall
        print(f"MAE {o['MAE']:.4f} RMSE {o['RMSE']:.4f} MCRPS {o['MCRPS']:.4f} MIS {o['MIS']:.4f} (n={o['n']})")
        print(f"reports in {out}")
        return 0
    per_week = 7 * 96
    if args.cv == "rolling":
        folds = ev.rolling_origin_folds(data.grid.length, per_week, cfg.cv_initial_weeks, cfg.cv_val_weeks,
                                        cfg.cv_step_weeks, cfg.cv_folds or None)
    else:
        folds = ev.sliding_window_folds(data.grid.length, per_week, cfg.cv_window_weeks, cfg.cv_val_weeks,
                                        cfg.cv_slide_weeks, cfg.cv_folds or None)
    ev.check_folds(folds)
    payloads = [(cfg, data, f) for f in folds]
    if cfg.jobs > 1 and len(folds) > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.jobs, len(folds))) as pool:
            results = list(pool.map(_fold_job, payloads))
    else:
        results = [_fold_job(p) for p in payloads]
    cv_dir = out / f"cv_{args.cv}"
    cv_dir.mkdir(parents=True, exist_ok=True)
    with open(cv_dir / "cv_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fold", "train_weeks", "val_weeks", "method", "n", *ev.METRICS])
        for fold, res in zip(folds, results):
            fold_dir = cv_dir / f"fold{fold.index + 1}"
            for name, (rows, mask) in res.items():
                rep = ev.build_report(rows, mask)
                if name == "tstar":
                    ev.write_report(rep, rows, fold_dir)
                (a, b), (c, d) = fold.train_weeks, fold.val_weeks
                w.writerow([fold.index + 1, f"w{a}-w{b}", f"w{c}-w{d}", name, rep.overall["n"],
                            *(repr(rep.overall[m]) for m in ev.METRICS)])
            print(f"fold {fold.index + 1}: {fold.label}")
    print(f"cross-validation reports in {cv_dir}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tstar", description="Two-stage probabilistic bike-share demand forecasting.")
    parser.add_argument("--config", help="flat key = value configuration file")
    parser.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
    parser.add_argument("--seed", type=int, help="override the random seed")
    parser.add_argument("--jobs", type=int, help="worker processes for fold-parallel phases")
    parser.add_argument("--out-dir", help="override the output directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset in the ingest schemas")
    p.add_argument("--spec", help="flat key = value synthetic spec")
    p.add_argument("--out", help="output directory (defaults to data_dir)")

    sub.add_parser("ingest", help="parse input files into a dataset bundle")

    p = sub.add_parser("train", help="train stage-1 and/or stage-2 models")
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--target", choices=KINDS)

    p = sub.add_parser("forecast", help="write stage-2 forecasts for the test period")
    p.add_argument("--target", choices=KINDS)
    p.add_argument("--zero-shot", metavar="STATIONS_CSV", help="also forecast these unseen stations")
    p.add_argument("--stations", help="comma-separated station ids to forecast")
    p.add_argument("--output", help="forecast CSV path")

    p = sub.add_parser("evaluate", help="score forecasts or run a cross-validation harness")
    p.add_argument("--forecasts", help="forecast CSV (defaults to the one in out_dir)")
    p.add_argument("--target", choices=KINDS)
    p.add_argument("--cv", choices=("none", "rolling", "sliding"), default="none")
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = {"seed": args.seed, "jobs": args.jobs, "out_dir": args.out_dir,
                     "target": getattr(args, "target", None)}
        cfg = load_config(args.config, overrides)
        if args.print_config:
            sys.stdout.write(cfg.dump())
            return 0
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        return COMMANDS[args.command](args, cfg)
    except TStarError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
