import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import nbinom

from tstar.errors import ConfigError
from tstar.evaluation import (
    Fold,
    ScoreRows,
    abnormal_mask,
    build_report,
    crps_empirical,
    crps_rows,
    interval_score,
    mae,
    rmse,
    rolling_origin_cv,
    rolling_origin_folds,
    run_cv,
    score_forecasts,
    sliding_window_folds,
    write_report,
)


def crps_by_integration(samples, y):
    """Integrate (F(x) - 1[x >= y])^2 exactly over the empirical step CDF."""
    xs = np.sort(np.asarray(samples, dtype=float))
    knots = np.unique(np.append(xs, y))
    total = 0.0
    for a, b in zip(knots[:-1], knots[1:]):
        F = np.searchsorted(xs, a, side="right") / len(xs)
        H = 1.0 if a >= y else 0.0
        total += (F - H) ** 2 * (b - a)
    return total


def hand_is(l, u, y, alpha=0.1):
    s = u - l
    if y < l:
        s += 2 / alpha * (l - y)
    if y > u:
        s += 2 / alpha * (y - u)
    return s


class TestPointMetrics:
    def test_examples(self):
        assert mae([1, 2], [1, 2]) == 0 and rmse([1, 2], [1, 2]) == 0
        assert mae([0, 2], [1, 1]) == 1 and mae([3], [5]) == 2
        assert rmse([0, 2], [1, 1]) == 1
        assert rmse([1, 3], [1, 1]) == math.sqrt(2)

    def test_spreadsheet_fixture(self):
        y = np.array([0, 1, 2, 5])
        p = np.array([1, 1, 0, 3])
        rows = score_forecasts(["A", "A", "B", "B"], [0, 1, 0, 1], y, point=p)
        rep = build_report(rows)
        # |e| = 1, 0, 2, 2 ; e^2 = 1, 0, 4, 4
        assert rep.overall["MAE"] == 1.25 and rep.overall["RMSE"] == 1.5
        assert rep.per_station["A"]["MAE"] == 0.5 and rep.per_station["B"]["RMSE"] == 2.0
        assert rep.per_timestep[1]["MAE"] == 1.0
        assert rep.overall["MCRPS"] == 1.25  # point mass: CRPS equals absolute error


class TestCrps:
    def test_examples(self):
        assert crps_empirical([4, 4, 4], 4) == 0
        assert crps_empirical([0, 2], 1) == 0.5
        assert crps_empirical([3, 3, 3], 5) == 2

    def test_brute_force_oracle(self, rng):
        for _ in range(200):
            n = rng.integers(1, 21)
            s = rng.poisson(rng.uniform(0.2, 6), n)
            y = int(rng.poisson(3))
            assert abs(crps_empirical(s, y) - crps_by_integration(s, y)) <= 1e-9

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=20), st.floats(-50, 50))
    def test_real_valued_samples(self, s, y):
        assert crps_empirical(s, y) == pytest.approx(crps_by_integration(s, y), abs=1e-9)

    @given(st.lists(st.integers(0, 30), min_size=1, max_size=20), st.integers(0, 30))
    def test_non_negative(self, s, y):
        assert crps_empirical(s, y) >= 0

    def test_rows_match_scalar(self, rng):
        s = rng.poisson(2, (7, 13))
        y = rng.poisson(2, 7)
        assert np.allclose(crps_rows(s, y), [crps_empirical(s[i], y[i]) for i in range(7)], atol=1e-12)

    def test_empty(self):
        with pytest.raises(ConfigError):
            crps_empirical([], 1)


class TestIntervalScore:
    def test_examples(self):
        assert interval_score(0, 2, 1) == 2
        assert interval_score(0, 2, 3, alpha=0.1) == 22
        assert interval_score(4, 4, 4) == 0

    @given(st.integers(0, 20), st.integers(0, 20), st.integers(0, 40), st.sampled_from([0.05, 0.1, 0.5]))
    def test_matches_hand_formula(self, a, b, y, alpha):
        l, u = min(a, b), max(a, b)
        assert interval_score(l, u, y, alpha) == pytest.approx(hand_is(l, u, y, alpha), rel=1e-12)

    def test_invalid(self):
        with pytest.raises(ConfigError):
            interval_score(3, 2, 1)
        with pytest.raises(ConfigError):
            interval_score(0, 1, 1, alpha=1.0)

    @pytest.mark.parametrize("mu, r", [(1.5, 2.0), (4.0, 1.0), (0.6, 0.8)])
    def test_proper_at_true_quantiles(self, mu, r):
        p = r / (r + mu)
        y = nbinom.rvs(r, p, size=200_000, random_state=np.random.default_rng(9))
        lo, hi = nbinom.ppf(0.05, r, p), nbinom.ppf(0.95, r, p)
        best = interval_score(np.full(y.shape, lo), np.full(y.shape, hi), y).mean()
        for dl, du in [(1, 0), (0, -1), (0, 2), (-1, 1), (2, 3)]:
            l2, u2 = max(lo + dl, 0), max(hi + du, lo + dl)
            other = interval_score(np.full(y.shape, l2), np.full(y.shape, u2), y).mean()
            assert best <= other + 1e-12


class TestReport:
    def rows(self, rng, n, offset=0):
        s = rng.poisson(2, (n, 10))
        return score_forecasts(rng.choice(["A", "B", "C"], n), offset + np.arange(n), rng.poisson(2, n), samples=s)

    def test_single_row(self):
        rows = score_forecasts(["A"], [7], [2], samples=[[1, 2, 3, 4]])
        rep = build_report(rows)
        assert rep.overall["MAE"] == rows.mae_term[0] and rep.overall["MCRPS"] == rows.crps[0]
        assert rep.per_regime["abnormal"]["n"] == 0 and rep.per_regime["normal"]["n"] == 1

    def test_sample_interval(self):
        rows = score_forecasts(["A"], [0], [0], samples=[np.arange(1, 101)])
        assert rows.lower[0] == 5 and rows.upper[0] == 95 and rows.point[0] == 50.5

    def test_linearity(self, rng):
        a, b = self.rows(rng, 30), self.rows(rng, 50, offset=30)
        ra, rb, rab = build_report(a), build_report(b), build_report(ScoreRows.concat([a, b]))
        for m in ("MAE", "MCRPS", "MIS"):
            assert rab.overall[m] == pytest.approx((30 * ra.overall[m] + 50 * rb.overall[m]) / 80, rel=1e-12)
        mse = (30 * ra.overall["RMSE"] ** 2 + 50 * rb.overall["RMSE"] ** 2) / 80
        assert rab.overall["RMSE"] == pytest.approx(math.sqrt(mse), rel=1e-12)

    def test_regimes_partition(self, rng):
        rows = self.rows(rng, 40)
        mask = rng.random(40) < 0.3
        rep = build_report(rows, mask)
        n_ab, n_no = rep.per_regime["abnormal"]["n"], rep.per_regime["normal"]["n"]
        assert n_ab == mask.sum() and n_ab + n_no == 40
        assert rep.per_regime["abnormal"]["MAE"] == pytest.approx(rows.mae_term[mask].mean(), rel=1e-12)

    def test_spread(self, rng):
        rows = self.rows(rng, 60)
        rep = build_report(rows)
        per = [rep.per_station[s]["MAE"] for s in rep.per_station]
        assert rep.spread["station"]["MAE"] == pytest.approx(np.std(per), rel=1e-12)

    def test_files(self, tmp_path, rng):
        rows = self.rows(rng, 12)
        paths = write_report(build_report(rows), rows, tmp_path)
        with open(paths["rows"]) as fh:
            lines = list(csv.reader(fh))
        assert lines[0] == ["station_id", "quarter_index", "y", "point", "p05", "p95", "abs_error", "sq_error",
                            "crps", "interval_score"] and len(lines) == 13
        with open(paths["summary"]) as fh:
            summary = list(csv.reader(fh))
        assert summary[0] == ["scope", "key", "n", "MAE", "RMSE", "MCRPS", "MIS"]
        assert summary[1][:3] == ["overall", "all", "12"]
        assert {r[1] for r in summary if r[0] == "regime"} == {"normal", "abnormal"}
        assert paths["temporal"].read_text().startswith("quarter_index,n,MAE,RMSE,MCRPS,MIS\n")


class TestAbnormalMask:
    def test_threshold(self):
        counts = np.array([[0, 2, 0, 2, 0, 2, 7, 4, 1]], dtype=float)  # train mean 1, std 1
        mask = abnormal_mask(counts, 6)
        assert mask[0].tolist() == [False] * 6 + [True, True, False]  # z = 6, 3, 0

    def test_uses_training_statistics_only(self, rng):
        counts = rng.poisson(2, (3, 100)).astype(float)
        other = counts.copy()
        other[:, 80:] = 0
        a, b = abnormal_mask(counts, 80), abnormal_mask(other, 80)
        assert np.array_equal(a[:, :80], b[:, :80])

    def test_zero_variance_station(self):
        mask = abnormal_mask(np.array([[1.0, 1.0, 1.0, 2.0, 1.0]]), 3)
        assert mask[0].tolist() == [False, False, False, True, False]


class TestFolds:
    def test_rolling_layout(self):
        folds = rolling_origin_folds(13 * 7, 7)
        labels = [f.label for f in folds[:4]]
        assert labels[:3] == ["w1-w4 / w5-w6", "w1-w6 / w7-w8", "w1-w8 / w9-w10"]
        # the fourth fold validates on the two weeks after its training boundary
        assert labels[3] == "w1-w10 / w11-w12"

    def test_sliding_layout(self):
        folds = sliding_window_folds(13 * 7, 7)
        assert [f.label for f in folds] == ["w1-w8 / w9-w10", "w2-w9 / w10-w11", "w3-w10 / w11-w12",
                                           "w4-w11 / w12-w13"]
        assert all(f.train_end - f.train_start == 8 * 7 for f in folds)

    def test_single_rolling_fold_is_plain_split(self):
        (f,) = rolling_origin_folds(6 * 96 * 7, 96 * 7)
        assert (f.train_start, f.train_end, f.val_start, f.val_end) == (0, 4 * 672, 4 * 672, 6 * 672)

    def test_step_covers_everything(self):
        assert len(sliding_window_folds(20 * 7, 7, step_weeks=20)) == 1

    def test_errors(self):
        with pytest.raises(ConfigError):
            sliding_window_folds(9 * 7, 7)
        with pytest.raises(ConfigError):
            rolling_origin_folds(5 * 7, 7)
        with pytest.raises(ConfigError):
            Fold(0, 0, 10, 8, 12, (1, 2), (2, 3)).validate()

    @given(st.integers(6, 30), st.integers(1, 5), st.integers(1, 3), st.integers(1, 3))
    def test_validation_after_training(self, weeks, init, val, step):
        if init + val > weeks:
            return
        for f in rolling_origin_folds(weeks * 96 * 7, 96 * 7, init, val, step):
            assert f.train_start == 0 and f.val_start >= f.train_end and f.val_end <= weeks * 96 * 7

    def test_run_cv_checks_rows(self):
        folds = rolling_origin_folds(8 * 7, 7, n_folds=2)

        def good(fold):
            q = np.arange(fold.val_start, fold.val_end)
            return score_forecasts(["A"] * len(q), q, np.ones(len(q)), point=np.full(len(q), float(fold.index)))

        results = rolling_origin_cv(good, 8 * 7, 7, n_folds=2)
        assert [r.report.overall["MAE"] for r in results] == [1.0, 0.0]

        def leaky(fold):
            return score_forecasts(["A"], [fold.train_end - 1], [1.0], point=[1.0])

        with pytest.raises(ConfigError):
            run_cv(folds, leaky)
