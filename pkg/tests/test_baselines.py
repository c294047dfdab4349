import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from misstsm import baselines
from misstsm.dataio import TimeSeries

NAN = np.nan


def series(rows):
    a = np.array(rows, dtype=float)
    return TimeSeries(np.where(np.isnan(a), 0.0, a), np.isnan(a).astype(float))


def test_spline_quadratic_example():
    assert baselines.spline_interpolate([0, 1, 2], [0, 1, 4], [1.5])[0] == pytest.approx(2.25, abs=1e-12)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_spline_exact_on_quadratics(a, b, c, seed):
    rng = np.random.default_rng(seed)
    t = np.arange(40.0)
    y = a * t ** 2 + b * t + c
    mask = rng.random(40) < 0.5
    mask[[0, -1]] = False
    ts = TimeSeries(y[:, None], mask[:, None].astype(float))
    out = baselines.spline_impute(ts).values[:, 0]
    scale = max(1.0, np.abs(y).max())
    assert np.max(np.abs(out - y)) / scale <= 1e-8


def test_spline_edges_and_fallbacks():
    out = baselines.spline_impute(series([[NAN, NAN], [2.0, NAN], [NAN, 5.0], [4.0, NAN], [NAN, NAN]]))
    np.testing.assert_allclose(out.values[:, 0], [2, 2, 3, 4, 4])  # two points: linear inside
    np.testing.assert_array_equal(out.values[:, 1], 5.0)  # single point: constant
    dense = series([[1.0], [7.0], [3.0]])
    np.testing.assert_array_equal(baselines.spline_impute(dense).values, dense.values)
    with pytest.raises(ValueError, match="v2"):
        baselines.spline_impute(series([[1.0, NAN], [2.0, NAN]]))
    with pytest.raises(ValueError):
        baselines.spline_impute(dense, order=5)


def test_locf_examples_and_idempotence():
    out = baselines.locf_impute(series([[1, NAN], [NAN, NAN], [NAN, 3], [4, NAN]])).values
    np.testing.assert_array_equal(out[:, 0], [1, 1, 1, 4])
    np.testing.assert_array_equal(out[:, 1], [3, 3, 3, 3])
    rng = np.random.default_rng(0)
    ts = TimeSeries(rng.normal(size=(30, 4)), (rng.random((30, 4)) < 0.5).astype(float))
    ts.mask[3] = 0
    once = baselines.locf_impute(ts).as_timeseries(ts)
    twice = baselines.locf_impute(once)
    np.testing.assert_array_equal(twice.values, once.values)


def knn_brute_force(values, mask, k):
    """Exhaustive reference: loops over every (row, missing entry, candidate row)."""
    T, N = values.shape
    out = values.copy()
    for t in range(T):
        for j in range(N):
            if not mask[t, j]:
                continue
            cands = []
            for s in range(T):
                if s == t or mask[s, j]:
                    continue
                co = [d for d in range(N) if not mask[t, d] and not mask[s, d]]
                if not co:
                    continue
                sq = sum((values[t, d] - values[s, d]) ** 2 for d in co)
                cands.append((np.sqrt(sq * N / len(co)), s))
            if not cands:
                obs = [values[s, j] for s in range(T) if not mask[s, j]]
                out[t, j] = sum(obs) / len(obs)
                continue
            cands.sort()
            out[t, j] = np.mean([values[s, j] for _, s in cands[:k]])
    return out


@given(st.integers(0, 2**31), st.integers(2, 50), st.integers(1, 5), st.integers(1, 12),
       st.floats(0.05, 0.8))
def test_knn_matches_brute_force(seed, T, N, k, p):
    rng = np.random.default_rng(seed)
    vals = np.round(rng.normal(size=(T, N)), 1)  # coarse grid forces distance ties
    mask = rng.random((T, N)) < p
    mask[rng.integers(0, T, size=N), np.arange(N)] = False
    ts = TimeSeries(vals, mask.astype(float))
    out = baselines.knn_impute(ts, k).values
    ref = knn_brute_force(ts.values, mask, k)
    assert np.max(np.abs(out - ref)) <= 1e-12


def test_knn_toy_grid_by_hand():
    ts = series([[0.0, 0.0], [1.0, 10.0], [2.0, NAN], [3.0, 30.0], [10.0, 100.0]])
    # distances from row 2 on variate 0, scaled by sqrt(2/1): rows 1 and 3 tie at sqrt(2)
    np.testing.assert_allclose(baselines.knn_impute(ts, k=1).values[2, 1], 10.0, atol=1e-12)
    np.testing.assert_allclose(baselines.knn_impute(ts, k=2).values[2, 1], 20.0, atol=1e-12)
    np.testing.assert_allclose(baselines.knn_impute(ts, k=3).values[2, 1], 40 / 3, atol=1e-12)


def test_knn_duplicate_and_constant_rows():
    ts = series([[1.0, 2.0, 3.0], [5.0, NAN, 9.0], [5.0, 7.0, 9.0], [0.0, 0.0, 0.0]])
    assert baselines.knn_impute(ts, k=1).values[1, 1] == 7.0
    const = series([[4.0, 4.0], [NAN, 4.0], [4.0, NAN], [4.0, 4.0]])
    np.testing.assert_array_equal(baselines.knn_impute(const).values, 4.0)


def test_knn_falls_back_to_column_mean():
    ts = series([[1.0, NAN], [NAN, 3.0], [NAN, 5.0]])
    assert baselines.knn_impute(ts).values[0, 1] == 4.0


@pytest.mark.parametrize("method", ["spline", "locf", "knn"])
def test_imputers_preserve_observed_and_fill_all(method):
    rng = np.random.default_rng(4)
    vals = rng.normal(size=(40, 3))
    mask = (rng.random((40, 3)) < 0.6).astype(float)
    mask[0] = 0
    ts = TimeSeries(vals, mask)
    res = baselines.impute(ts, method)
    obs = mask == 0
    assert np.array_equal(res.values[obs], ts.values[obs])
    assert np.all(np.isfinite(res.values))
    assert res.provenance["method"] == method
    np.testing.assert_array_equal(res.original_mask, mask)
    assert res.as_timeseries(ts).mask.sum() == 0


def test_impute_unknown_method_and_rmse():
    ts = series([[1.0], [NAN], [3.0]])
    with pytest.raises(ValueError, match="unknown"):
        baselines.impute(ts, "mice")
    truth = np.array([[1.0], [5.0], [3.0]])
    res = baselines.impute(ts, "locf")
    assert baselines.imputation_rmse(res, truth, ts.mask) == 4.0
    with pytest.raises(ValueError):
        baselines.imputation_rmse(res, truth, np.zeros((3, 1)))
