import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.metrics import average_precision_score, f1_score, roc_auc_score

from misstsm import evaluation as ev
from misstsm.dataio import TimeSeries
from misstsm.numkernel import UndefinedMetricError


def test_regression_metric_examples():
    assert ev.mse([0, 2], [0, 0]) == 2.0
    assert ev.mae([0, 2], [0, 0]) == 1.0
    assert ev.mse([1.5, -2], [1.5, -2]) == 0.0
    assert ev.mse([3.0], [1.0]) == ev.mae([3.0], [1.0]) ** 2


def test_masked_mse_all_observed_equals_mse(rng):
    p, t = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert ev.masked_mse(p, t, np.ones((4, 3))) == ev.mse(p, t)
    with pytest.raises(UndefinedMetricError):
        ev.masked_mae(p, t, np.zeros((4, 3)))


def test_classification_perfect_and_hand_examples():
    y = np.array([0, 1, 1, 0, 1])
    assert ev.f1_macro(y, y, 2) == 1.0
    assert ev.auroc(y.astype(float), y) == 1.0
    assert ev.auprc(y.astype(float), y) == 1.0
    assert ev.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert ev.auroc(np.full(6, 0.3), [0, 1, 0, 1, 1, 0]) == 0.5


def test_auc_needs_both_classes():
    with pytest.raises(UndefinedMetricError):
        ev.auroc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        ev.auprc([0.1, 0.2], [0, 0])


@given(st.integers(0, 2**31), st.integers(8, 60), st.booleans())
def test_metrics_match_sklearn(seed, n, coarse):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    labels[:2] = [0, 1]
    scores = rng.random(n)
    if coarse:
        scores = np.round(scores, 1)  # many ties
    assert ev.auroc(scores, labels) == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)
    assert ev.auprc(scores, labels) == pytest.approx(average_precision_score(labels, scores), abs=1e-12)
    preds = rng.integers(0, 3, size=n)
    y3 = rng.integers(0, 3, size=n)
    ref = f1_score(y3, preds, average="macro", labels=[0, 1, 2], zero_division=0)
    assert ev.f1_macro(preds, y3, 3) == pytest.approx(ref, abs=1e-12)


@given(st.integers(0, 2**31))
def test_auroc_monotone_invariance_and_f1_relabeling(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=30)
    labels[:2] = [0, 1]
    s = rng.normal(size=30)
    assert ev.auroc(s, labels) == ev.auroc(np.exp(3 * s) + 1, labels)
    preds, y = rng.integers(0, 4, size=30), rng.integers(0, 4, size=30)
    perm = rng.permutation(4)
    assert ev.f1_macro(perm[preds], perm[y], 4) == pytest.approx(ev.f1_macro(preds, y, 4), abs=1e-15)


def test_classification_metrics_multiclass():
    probs = np.array([[0.8, 0.1, 0.1], [0.2, 0.7, 0.1], [0.1, 0.2, 0.7], [0.6, 0.3, 0.1]])
    m = ev.classification_metrics(probs, np.array([0, 1, 2, 0]))
    assert m["f1"] == 1.0 and m["auroc"] == 1.0 and m["accuracy"] == 1.0


def test_pearson_three_point_hand_check():
    # x = [1,2,3], y = [2,4,5]: sxy = 3, sxx = 2, syy = 14/3  ->  r = 3 / sqrt(28/3)
    assert ev.pearson([1, 2, 3], [2, 4, 5]) == pytest.approx(3 / np.sqrt(28 / 3), abs=1e-15)
    assert np.isnan(ev.pearson([1, 2, 3], [4, 4, 4]))


def test_metric_report_json_and_fingerprint(tmp_path):
    cfg = {"b": [1, 2], "a": {"y": 0.5, "x": "s"}}
    fp = ev.fingerprint(cfg)
    assert fp == ev.fingerprint(json.loads(json.dumps(cfg)))
    assert fp == ev.fingerprint({"a": {"x": "s", "y": 0.5}, "b": [1, 2]})
    r = ev.MetricReport("forecast", {"mse": 0.25}, 10, 3, fp)
    back = ev.MetricReport.from_json(r.to_json())
    assert back == r and back.to_json() == r.to_json()
    r.save(tmp_path / "r.json")
    assert ev.MetricReport.from_json((tmp_path / "r.json").read_text()) == r
    with pytest.raises(ValueError):
        ev.MetricReport("forecast", {"mse": float("nan")}, 1, 0, fp)
    with pytest.raises(ValueError):
        ev.MetricReport("regress", {}, 1, 0, fp)


def test_scaling_benchmark_table(tmp_path):
    rows = ev.scaling_benchmark([4, 8, 16], T=32, D=8, reps=2)
    assert [n for n, _ in rows] == [4, 8, 16]
    assert all(s > 0 for _, s in rows)
    ev.save_benchmark_csv(rows, tmp_path / "b.csv")
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "N,mean_forward_seconds" and len(lines) == 4


def _truth(T=400, N=3):
    t = np.arange(T)
    vals = np.stack([np.sin(2 * np.pi * t / p) for p in (12, 20, 31)[:N]], axis=1)
    return TimeSeries(vals, np.zeros_like(vals))


def test_propagation_identical_imputations_degenerate():
    def fit_predict(tr, va, ctx):
        return np.zeros((ctx[0].shape[0], 4, 3))

    pts, corr = ev.error_propagation_study(_truth(), ["locf"], fit_predict, fractions=(0.5,),
                                           seeds=(0, 0), L=16, S=4)
    assert len(pts) == 2 and np.isnan(corr)


def test_propagation_perfect_imputation_anchors_minimum():
    from misstsm import experiments

    pts, _ = ev.error_propagation_study(
        _truth(), ["spline", "locf"], lambda tr, va, ctx: experiments.linear_forecaster(tr, va, ctx, 16, 4),
        fractions=(0.0, 0.6), seeds=(0,), L=16, S=4)
    zero = [p for p in pts if p.fraction == 0.0]
    assert all(p.imputation_rmse == 0.0 for p in zero)
    assert min(pts, key=lambda p: p.downstream_mse).fraction == 0.0


def test_propagation_needs_ground_truth():
    ts = _truth()
    ts.mask[0, 0] = 1
    with pytest.raises(ValueError):
        ev.error_propagation_study(ts, ["locf"], lambda *a: None)
