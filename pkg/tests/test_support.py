import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gapdecomp.data import ObservationTable
from gapdecomp.errors import StrategyMismatch
from gapdecomp.support import (
    B_ONLY, COMMON, W_ONLY, SupportStrategy, estimate_partition, region_masses,
)

from conftest import make_table


def interval_table():
    xw = np.arange(1, 11)
    xb = np.arange(5, 16)
    x = np.concatenate([xw, xb]).astype(float)
    g = ["W"] * xw.size + ["B"] * xb.size
    return make_table(np.arange(x.size), g, x)


def test_range_1d_interval_intersection():
    t = interval_table()
    p = estimate_partition(t, SupportStrategy("range_1d"))
    x = t.covariates["x"]
    assert np.all(p.region[t.is_w & (x < 5)] == W_ONLY)
    assert np.all(p.region[t.is_b & (x > 10)] == B_ONLY)
    rest = ~((t.is_w & (x < 5)) | (t.is_b & (x > 10)))
    assert np.all(p.region[rest] == COMMON)
    # 4 of 10 W rows below 5, 5 of 11 B rows above 10
    assert p.mass_w_out == pytest.approx(0.4, abs=1e-15)
    assert p.mass_b_out == pytest.approx(5 / 11, abs=1e-15)


def test_auto_picks_range_1d():
    p = estimate_partition(interval_table())
    assert p.strategy["kind"] == "range_1d"


def test_full_overlap():
    x = np.array([1.0, 2, 3, 1, 2, 3])
    t = make_table(np.arange(6), ["W"] * 3 + ["B"] * 3, x)
    p = estimate_partition(t)
    assert np.all(p.region == COMMON)
    assert region_masses(p) == (1.0, 0.0, 1.0, 0.0)


def test_boundary_is_inside():
    # W range [0, 5], B range [5, 9]: the shared value 5 overlaps
    t = make_table(np.zeros(4), ["W", "W", "B", "B"], [0.0, 5.0, 5.0, 9.0])
    p = estimate_partition(t)
    assert list(p.region) == [W_ONLY, COMMON, COMMON, B_ONLY]


def test_counting_masses():
    t = make_table(np.zeros(5), ["W", "W", "W", "B", "B"], [0.0, 1, 2, 1, 2])
    p = estimate_partition(t)
    assert p.mass_w_out == pytest.approx(1 / 3)


def test_weighted_masses():
    t = make_table(np.zeros(5), ["W", "W", "W", "B", "B"], [1.0, 2, 0, 1, 2],
                   weight=[1, 1, 2, 1, 1])
    p = estimate_partition(t)
    assert p.region[2] == W_ONLY
    assert p.mass_w_out == 0.5
    assert p.mass_w_in == 0.5


def test_range_1d_mismatch():
    t = ObservationTable(np.zeros(4), np.array(["W", "W", "B", "B"]), np.ones(4),
                         {"a": np.zeros(4), "b": np.zeros(4)},
                         (("a", "continuous"), ("b", "continuous")))
    with pytest.raises(StrategyMismatch):
        estimate_partition(t, SupportStrategy("range_1d"))


def test_cell_range():
    # cell "f": W x in [0, 4], B x in [2, 6]; cell "m" only W; cell "n" only B
    sex = np.array(["f", "f", "f", "m", "f", "f", "n"])
    x = np.array([0.0, 3, 4, 1, 2, 6, 1])
    g = np.array(["W", "W", "W", "W", "B", "B", "B"])
    t = ObservationTable(np.zeros(7), g, np.ones(7), {"sex": sex, "x": x},
                         (("sex", "discrete"), ("x", "continuous")))
    p = estimate_partition(t)
    assert p.strategy["kind"] == "cell_range"
    assert list(p.region) == [W_ONLY, COMMON, COMMON, W_ONLY, COMMON, B_ONLY, B_ONLY]
    assert p.mass_w_out == 0.5
    assert p.mass_b_out == pytest.approx(2 / 3)


def test_explicit_bounds():
    t = interval_table()
    p = estimate_partition(t, SupportStrategy("explicit", {"W": {"x": [0, 8]}, "B": {"x": [3, 20]}}))
    x = t.covariates["x"]
    assert np.all(p.region[t.is_w & (x < 3)] == W_ONLY)
    assert np.all(p.region[t.is_b & (x > 8)] == B_ONLY)


def test_explicit_discrete_levels():
    t = ObservationTable(np.zeros(4), np.array(["W", "W", "B", "B"]), np.ones(4),
                         {"e": np.array(["a", "b", "a", "c"])}, (("e", "discrete"),))
    p = estimate_partition(t, SupportStrategy("explicit", {"W": {"e": ["a", "b"]}, "B": {"e": ["a", "c"]}}))
    assert list(p.region) == [COMMON, W_ONLY, COMMON, B_ONLY]


small_tables = st.integers(2, 12).flatmap(lambda n: st.tuples(
    st.lists(st.integers(-5, 5), min_size=n, max_size=n),
    st.lists(st.integers(-5, 5), min_size=n, max_size=n),
    st.lists(st.floats(0.1, 10), min_size=2 * n, max_size=2 * n)))


def _table(xw, xb, w):
    x = np.array(xw + xb, float)
    return make_table(np.zeros(x.size), ["W"] * len(xw) + ["B"] * len(xb), x, weight=w)


@settings(max_examples=80, deadline=None)
@given(small_tables)
def test_partition_invariants(data):
    xw, xb, w = data
    t = _table(xw, xb, w)
    p = estimate_partition(t)
    assert abs(p.mass_w_in + p.mass_w_out - 1) <= 1e-12
    assert abs(p.mass_b_in + p.mass_b_out - 1) <= 1e-12
    assert all(0 <= m <= 1 for m in region_masses(p))
    assert not np.any(p.region[t.is_w] == B_ONLY)
    assert not np.any(p.region[t.is_b] == W_ONLY)
    wt = t.weight
    assert p.mass_w_out == pytest.approx(wt[t.is_w & (p.region == W_ONLY)].sum() / wt[t.is_w].sum(), abs=1e-14)
    # relabelling swaps masses and tags
    q = estimate_partition(t.swap_groups())
    assert (q.mass_w_in, q.mass_w_out) == pytest.approx((p.mass_b_in, p.mass_b_out), abs=1e-14)
    swapped = np.where(p.region == W_ONLY, B_ONLY, np.where(p.region == B_ONLY, W_ONLY, COMMON))
    assert np.array_equal(q.region, swapped)


@settings(max_examples=60, deadline=None)
@given(small_tables, st.floats(-6, 0), st.floats(0, 6), st.floats(0, 3), st.floats(0, 3))
def test_widening_b_bounds_is_monotone(data, lo, hi, dlo, dhi):
    xw, xb, w = data
    t = _table(xw, xb, w)
    narrow = estimate_partition(t, SupportStrategy("explicit", {"B": {"x": [lo, hi]}}))
    wide = estimate_partition(t, SupportStrategy("explicit", {"B": {"x": [lo - dlo, hi + dhi]}}))
    moved = t.is_w & (narrow.region == COMMON) & (wide.region == W_ONLY)
    assert not moved.any()
