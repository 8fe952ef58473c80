import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gapdecomp.data import EvaluationGrid, ObservationTable, weighted_ecdf
from gapdecomp.distreg import (
    ALL_ABOVE, ALL_BELOW, FITTED, PROBIT, SEPARATED, ConditionalCdf, CovariateTransform,
    TransformSpec, fit_binary, fit_conditional_cdf, predict, rearrange,
)
from gapdecomp.errors import NonConformableCovariates, RankDeficientDesign
from gapdecomp.synth import DgpSpec, generate

from conftest import make_table


def cell_table(seed=0, n=400):
    rng = np.random.default_rng(seed)
    a = rng.choice(["f", "m"], n)
    b = rng.choice(["x", "y"], n)
    y = rng.integers(0, 6, n) + (a == "m") + 2 * (b == "y")
    g = np.where(rng.random(n) < 0.5, "W", "B")
    w = rng.uniform(0.5, 2.0, n)
    return ObservationTable(y.astype(float), g, w, {"a": a, "b": b},
                            (("a", "discrete"), ("b", "discrete")))


def test_intercept_only_is_weighted_ecdf():
    rng = np.random.default_rng(1)
    y = rng.normal(size=300)
    w = rng.uniform(0.2, 3, 300)
    t = make_table(y, ["W"] * 150 + ["B"] * 150, rng.normal(size=300), weight=w)
    grid = EvaluationGrid(np.linspace(-3.5, 3.5, 41))
    m = fit_conditional_cdf(t, "W", grid, TransformSpec.intercept_only())
    ref = weighted_ecdf(y[:150], w[:150], grid.points)
    assert np.max(np.abs(m.predict_table(t, t.is_w)[0] - ref)) <= 1e-9
    below = grid.points < y[:150].min()
    assert all(f == ALL_ABOVE for f, b in zip(m.flags, below) if b)
    above = grid.points >= y[:150].max()
    assert all(f == ALL_BELOW for f, b in zip(m.flags, above) if b)


def test_saturated_matches_cell_ecdfs():
    t = cell_table()
    grid = EvaluationGrid(np.arange(0, 9, dtype=float))
    m = fit_conditional_cdf(t, "W", grid, TransformSpec.saturated())
    for a in "fm":
        for b in "xy":
            rows = t.is_w & (t.covariates["a"] == a) & (t.covariates["b"] == b)
            ref = weighted_ecdf(t.outcome[rows], t.weight[rows], grid.points)
            got = m.curves(m.transform.design_row({"a": a, "b": b})[None, :])[0]
            assert np.max(np.abs(got - ref)) <= 1e-8
    grads = [g for g in m.diagnostics["grad_norm"] if g is not None]
    assert max(grads) <= 1e-8


def test_separated_threshold_is_exact():
    # level "lo" always has y <= 0, the others mix
    x = np.array(["lo", "lo", "lo", "mid", "mid", "hi", "hi", "lo", "hi"])
    y = np.array([0.0, 0, 0, 0, 1, 1, 0, 0, 1])
    g = np.array(["W"] * 7 + ["B", "B"])
    t = ObservationTable(y, g, np.ones(9), {"x": x}, (("x", "discrete"),))
    m = fit_conditional_cdf(t, "W", EvaluationGrid([0.0, 1.0]), TransformSpec(discrete="dummies"))
    assert m.flags[0] == SEPARATED
    assert m.diagnostics["n_separated"][0] == 1
    assert predict(m, {"x": "lo"}, 0.0) == 1.0
    assert predict(m, {"x": "mid"}, 0.0) == pytest.approx(0.5, abs=1e-9)


def test_logit_dgp_recovers_truth():
    spec = DgpSpec.from_dict({
        "kind": "logit_linear", "seed": 3, "n": {"W": 10000, "B": 200},
        "x": {"W": {"low": 0, "high": 4}, "B": {"low": 0, "high": 4}},
        "knots": [0, 5, 10],
        "a": {"W": [-3, 0, 3], "B": [-3, 0, 3]},
        "b": {"W": [-0.3, -0.3, -0.3], "B": [0, 0, 0]},
    })
    t = generate(spec)
    grid = EvaluationGrid(np.linspace(1, 9, 17))
    m = fit_conditional_cdf(t, "W", grid, TransformSpec(degree=1))
    err = 0.0
    for x in (0.5, 2.0, 3.5):
        got = m.curves(m.transform.design_row({"x": x})[None, :])[0]
        true = np.array([spec.true_cdf("W", x, y) for y in grid.points])
        err = max(err, np.max(np.abs(got - true)))
    assert err <= 0.05


def test_rearrange_examples():
    assert list(rearrange([0.1, 0.3, 0.25, 0.6])) == [0.1, 0.3, 0.3, 0.6]
    assert list(rearrange([0.2, 0.4, 0.5, 0.9])) == [0.2, 0.4, 0.5, 0.9]
    assert list(rearrange([-0.1, 1.2])) == [0.0, 1.0]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 2), min_size=1, max_size=30))
def test_rearrange_properties(curve):
    r = rearrange(curve)
    assert np.all(np.diff(r) >= 0)
    assert np.all((r >= 0) & (r <= 1))
    clipped = np.clip(curve, 0, 1)
    assert np.all(r >= clipped)
    assert np.array_equal(rearrange(r), r)


def _continuous_table(n=600, seed=4):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 5, n)
    y = x + rng.normal(size=n)
    return make_table(y, np.where(np.arange(n) % 2, "B", "W"), x, weight=rng.uniform(0.5, 2, n))


def test_row_order_and_parallel_are_identical():
    t = _continuous_table()
    grid = EvaluationGrid(np.linspace(0, 5, 21))
    m1 = fit_conditional_cdf(t, "W", grid)
    m4 = fit_conditional_cdf(t, "W", grid, n_jobs=4)
    assert np.array_equal(m1.coefficients, m4.coefficients)
    perm = np.random.default_rng(0).permutation(len(t))
    m_perm = fit_conditional_cdf(t.subset(perm), "W", grid)
    assert np.array_equal(m1.coefficients, m_perm.coefficients)


def test_weight_scaling_invariance():
    t = _continuous_table()
    grid = EvaluationGrid(np.linspace(0, 5, 11))
    m1 = fit_conditional_cdf(t, "W", grid)
    t2 = ObservationTable(t.outcome, t.group, t.weight * 7.5, t.covariates, t.schema, t.labels)
    m2 = fit_conditional_cdf(t2, "W", grid)
    d1, d2 = m1.predict_table(t), m2.predict_table(t2)
    assert np.max(np.abs(d1 - d2)) <= 1e-9


def test_gradient_diagnostics_and_flags():
    t = _continuous_table()
    m = fit_conditional_cdf(t, "W", EvaluationGrid(np.linspace(0, 5, 11)))
    assert all(f == FITTED for f in m.flags)
    assert max(m.diagnostics["grad_norm"]) <= 1e-8
    assert m.diagnostics["n_rows"] == int(t.is_w.sum())


def test_json_round_trip():
    t = cell_table()
    m = fit_conditional_cdf(t, "B", EvaluationGrid(np.arange(9.0)), TransformSpec(discrete="dummies"))
    back = ConditionalCdf.from_dict(json.loads(json.dumps(m.to_dict())))
    assert np.array_equal(back.predict_table(t), m.predict_table(t))


def test_probit_link():
    t = _continuous_table()
    grid = EvaluationGrid(np.linspace(0, 5, 11))
    m = fit_conditional_cdf(t, "W", grid, link=PROBIT)
    l = fit_conditional_cdf(t, "W", grid)
    assert max(m.diagnostics["grad_norm"]) <= 1e-8
    assert np.max(np.abs(m.predict_table(t) - l.predict_table(t))) < 0.05


def test_rank_deficient_design():
    t = ObservationTable(np.arange(4.0), np.array(["W", "W", "B", "B"]), np.ones(4),
                         {"x": np.zeros(4), "z": np.array([1.0, 2, 3, 4])},
                         (("x", "continuous"), ("z", "continuous")))
    with pytest.raises(RankDeficientDesign) as exc:
        fit_conditional_cdf(t, "W", EvaluationGrid([0.0, 1.0]), TransformSpec(degree=1))
    assert exc.value.details["columns"]


def test_unseen_level_rejected():
    t = cell_table()
    m = fit_conditional_cdf(t, "W", EvaluationGrid([2.0, 4.0]), TransformSpec.saturated())
    with pytest.raises(NonConformableCovariates):
        m.transform.design_row({"a": "z", "b": "x"})


def test_fit_binary_all_one_side():
    X = np.ones((3, 1))
    assert fit_binary(X, np.ones(3), np.zeros(3)).flag == ALL_BELOW
    assert fit_binary(X, np.zeros(3), np.ones(3)).flag == ALL_ABOVE


def test_predict_below_grid_is_zero():
    t = _continuous_table()
    m = fit_conditional_cdf(t, "W", EvaluationGrid([1.0, 2.0]))
    assert predict(m, {"x": 1.0}, 0.5) == 0.0
    assert 0.0 < predict(m, {"x": 1.0}, 1.5) < 1.0


def test_transform_round_trip():
    t = cell_table()
    tr = CovariateTransform.fit(TransformSpec(), t)
    back = CovariateTransform.from_dict(json.loads(json.dumps(tr.to_dict())))
    assert np.array_equal(back.design(t), tr.design(t))


def test_complete_separation_continuous():
    # y <= 0 exactly when x < 0
    x = np.linspace(-3, 3, 40)
    y = np.where(x < 0, -1.0, 1.0)
    t = make_table(np.r_[y, 0.0, 1.0], ["W"] * 40 + ["B", "B"], np.r_[x, 0.0, 0.0])
    m = fit_conditional_cdf(t, "W", EvaluationGrid([0.0, 2.0]), TransformSpec(degree=1))
    assert m.flags[0] == SEPARATED
    p = m.predict_table(t, t.is_w)[:, 0]
    assert np.array_equal(p, (x < 0).astype(float))
    assert m.flags[1] == ALL_BELOW


def test_large_index_without_separation_is_fitted():
    # a steep but overlapping relation stays a finite fit
    rng = np.random.default_rng(0)
    x = rng.uniform(-3, 3, 2000)
    y = 4 * x + rng.logistic(size=2000)
    t = make_table(np.r_[y, 0.0, 1.0], ["W"] * 2000 + ["B", "B"], np.r_[x, 0.0, 0.0])
    m = fit_conditional_cdf(t, "W", EvaluationGrid([0.0, 1.0]), TransformSpec(degree=1))
    assert m.flags == (FITTED, FITTED)
    assert abs(m.coefficients[0, 1] / m.transform.scales["x"] + 4) < 0.5
