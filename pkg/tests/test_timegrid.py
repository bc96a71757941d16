from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tstar.errors import ConfigError, DataError
from tstar.ingest import TripRecord
from tstar.timegrid import (
    DemandSeries,
    SplitSpec,
    TimeGrid,
    aggregate_all,
    aggregate_trips,
    build_grid,
    downsample_to_hourly,
    split,
    to_hourly,
)

START = datetime(2022, 10, 2)


def pickup(ts, station="A"):
    return TripRecord(ts, ts + timedelta(minutes=5), station, "Z")


class TestBuildGrid:
    def test_quarter_day(self):
        g = build_grid(START, 15, 96)
        assert g.length == 96
        assert g.end - g.start == timedelta(days=1)

    def test_hourly_day(self):
        g = build_grid(START, 60, 24)
        assert g.end == START + timedelta(days=1)

    def test_rejects_other_resolution(self):
        with pytest.raises(ConfigError):
            build_grid(START, 20, 10)

    def test_rejects_empty(self):
        with pytest.raises(ConfigError):
            build_grid(START, 15, 0)

    def test_half_open_intervals(self):
        g = build_grid(START, 15, 8)
        assert g.index_of(START + timedelta(minutes=14, seconds=59)) == 0
        assert g.index_of(START + timedelta(minutes=15)) == 1
        assert g.index_of(START - timedelta(seconds=1)) is None
        assert g.index_of(g.end) is None

    def test_calendar_fields(self):
        g = build_grid(START, 15, 96 * 2)
        # 2022-10-02 is a Sunday
        assert g.day_of_week()[0] == 6
        assert g.day_of_week()[96] == 0
        assert g.hour_of_day()[4] == 1
        assert list(g.quarter_of_hour()[:5]) == [0, 1, 2, 3, 0]

    @given(st.integers(min_value=0, max_value=4 * 500 - 1))
    def test_parent_hour(self, q):
        g = build_grid(START, 15, 4 * 500)
        hg = g.hourly()
        assert g.hour_index()[q] == q // 4
        assert hg.interval_start(q // 4) <= g.interval_start(q) < hg.interval_start(q // 4 + 1)


class TestAggregate:
    grid = build_grid(datetime(2022, 10, 2, 8), 15, 8)

    def test_empty(self):
        res = aggregate_trips([], self.grid, "A", "pickup")
        assert res.series.values.sum() == 0 and res.discarded == 0

    def test_same_interval(self):
        t0 = self.grid.start
        trips = [pickup(t0 + timedelta(minutes=m)) for m in (1, 7, 14)]
        assert aggregate_trips(trips, self.grid, "A", "pickup").series.values[0] == 3

    def test_boundary_goes_to_later_interval(self):
        trips = [pickup(self.grid.start + timedelta(minutes=15))]
        v = aggregate_trips(trips, self.grid, "A", "pickup").series.values
        assert v[0] == 0 and v[1] == 1

    def test_dropoff_uses_destination_and_end_time(self):
        t0 = self.grid.start
        trip = TripRecord(t0, t0 + timedelta(minutes=20), "A", "B")
        assert aggregate_trips([trip], self.grid, "B", "dropoff").series.values[1] == 1
        assert aggregate_trips([trip], self.grid, "B", "pickup").series.values.sum() == 0

    def test_off_grid_is_discarded(self):
        trips = [pickup(self.grid.start - timedelta(minutes=1)), pickup(self.grid.end)]
        res = aggregate_trips(trips, self.grid, "A", "pickup")
        assert res.discarded == 2 and res.series.values.sum() == 0

    @given(st.lists(st.integers(min_value=-30, max_value=200), max_size=60))
    def test_conservation_and_commuting(self, minutes):
        grid = build_grid(datetime(2022, 10, 2, 8), 15, 8)
        trips = [pickup(grid.start + timedelta(minutes=m)) for m in minutes]
        inside = sum(0 <= m < 120 for m in minutes)
        q = aggregate_trips(trips, grid, "A", "pickup")
        assert q.series.values.sum() == inside
        assert q.discarded == len(minutes) - inside
        hourly = aggregate_trips(trips, grid.hourly(), "A", "pickup").series.values
        assert np.array_equal(downsample_to_hourly(q.series).values, hourly)
        matrix, dropped = aggregate_all(trips, grid, ["A", "B"], "pickup")
        assert np.array_equal(matrix[0], q.series.values) and matrix[1].sum() == 0
        assert dropped == len(minutes) - inside


class TestDownsample:
    g = build_grid(START, 15, 8)

    def series(self, values):
        g = build_grid(START, 15, len(values))
        return DemandSeries("A", g, "pickup", np.array(values))

    def test_sum(self):
        assert list(downsample_to_hourly(self.series([0, 1, 0, 2])).values) == [3]

    def test_zeros(self):
        assert list(downsample_to_hourly(self.series([0] * 8)).values) == [0, 0]

    def test_two_hours(self):
        assert list(downsample_to_hourly(self.series([1, 1, 1, 1, 2, 0, 0, 0])).values) == [4, 2]

    def test_rejects_ragged(self):
        with pytest.raises(ConfigError):
            downsample_to_hourly(self.series([1, 2, 3]))

    def test_rejects_hourly_input(self):
        s = DemandSeries("A", build_grid(START, 60, 4), "pickup", np.zeros(4, dtype=int))
        with pytest.raises(ConfigError):
            downsample_to_hourly(s)

    def test_matrix_helper(self):
        assert to_hourly(np.arange(8).reshape(1, 8)).tolist() == [[6, 22]]


class TestDemandSeries:
    def test_rejects_negative(self):
        with pytest.raises(DataError):
            DemandSeries("A", build_grid(START, 15, 2), "pickup", np.array([1, -1]))

    def test_rejects_fractional(self):
        with pytest.raises(DataError):
            DemandSeries("A", build_grid(START, 15, 2), "pickup", np.array([1.5, 0.0]))

    def test_values_are_read_only(self):
        s = DemandSeries("A", build_grid(START, 15, 2), "pickup", np.array([1, 2]))
        with pytest.raises(ValueError):
            s.values[0] = 5


class TestSplit:
    def series(self, n=10):
        return DemandSeries("A", build_grid(START, 15, n), "pickup", np.arange(n))

    def test_lengths(self):
        tr, te = split(self.series(), SplitSpec(7, 10))
        assert (len(tr), len(te)) == (7, 3)

    def test_empty_train(self):
        with pytest.raises(ConfigError):
            split(self.series(), SplitSpec(0, 10))

    def test_past_end(self):
        with pytest.raises(ConfigError):
            split(self.series(), SplitSpec(5, 11))

    @given(st.integers(min_value=1, max_value=39), st.integers(min_value=0, max_value=39))
    def test_disjoint_and_complete(self, a, extra):
        b = min(a + 1 + extra, 40)
        tr, te = split(self.series(40), SplitSpec(a, b))
        assert np.array_equal(np.concatenate([tr, te]), np.arange(b))

    def test_coarsen_scale_round_trip(self):
        spec = SplitSpec(280, 360)
        assert spec.coarsened(4) == SplitSpec(70, 90)
        assert spec.coarsened(4).scaled(4) == spec
