"""Metrics, metric reports and the measurement routines (scaling benchmark,
imputation-error propagation study)."""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import numkernel as nk


# --- regression metrics ------------------------------------------------------

def mse(pred, target) -> float:
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    return float(np.mean((pred - target) ** 2))


def mae(pred, target) -> float:
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    return float(np.mean(np.abs(pred - target)))


def masked_mse(pred, target, observed) -> float:
    return nk.mse_masked(np.asarray(pred, float), np.asarray(target, float),
                         np.asarray(observed, float))


def masked_mae(pred, target, observed) -> float:
    observed = np.asarray(observed, float)
    n = observed.sum()
    if n == 0:
        raise nk.UndefinedMetricError("masked_mae: no observed entries")
    return float(np.sum(np.abs(np.asarray(pred) - np.asarray(target)) * observed) / n)


# --- classification metrics --------------------------------------------------

def f1_macro(preds, labels, C: int) -> float:
    """Unweighted mean of per-class F1; a class absent from both gets F1 0."""
    preds = np.asarray(preds, int)
    labels = np.asarray(labels, int)
    scores = []
    for c in range(C):
        tp = np.sum((preds == c) & (labels == c))
        fp = np.sum((preds == c) & (labels != c))
        fn = np.sum((preds != c) & (labels == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def auroc(scores, labels) -> float:
    """Binary ROC AUC via the Mann-Whitney rank statistic (ties share midranks)."""
    scores = np.asarray(scores, float)
    labels = np.asarray(labels).astype(bool)
    n_pos = labels.sum()
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise nk.UndefinedMetricError("auroc needs both positive and negative labels")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision: step-wise sum of precision times recall increments.

    Samples sharing a score enter at the same threshold; no interpolation.
    """
    scores = np.asarray(scores, float)
    labels = np.asarray(labels).astype(bool)
    n_pos = labels.sum()
    if n_pos == 0:
        raise nk.UndefinedMetricError("auprc needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    precision = tp[last] / (tp[last] + fp[last])
    recall = tp[last] / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def one_vs_rest(metric: Callable, probs, labels) -> float:
    """Macro average of a binary score metric over classes present in ``labels``."""
    probs = np.asarray(probs, float)
    labels = np.asarray(labels, int)
    vals = [metric(probs[:, c], labels == c) for c in range(probs.shape[1])
            if 0 < np.sum(labels == c) < labels.size]
    return float(np.mean(vals))


def classification_metrics(probs, labels) -> dict:
    probs = np.asarray(probs, float)
    C = probs.shape[1]
    preds = probs.argmax(axis=1)
    if C == 2:
        roc, pr = auroc(probs[:, 1], labels), auprc(probs[:, 1], labels)
    else:
        roc, pr = one_vs_rest(auroc, probs, labels), one_vs_rest(auprc, probs, labels)
    return {"f1": f1_macro(preds, labels, C), "auroc": roc, "auprc": pr,
            "accuracy": float(np.mean(preds == np.asarray(labels)))}


def pearson(x, y) -> float:
    """Pearson correlation; NaN when either input has zero variance."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    xc, yc = x - x.mean(), y - y.mean()
    denom = np.sqrt((xc * xc).sum() * (yc * yc).sum())
    if denom == 0:
        return float("nan")
    return float((xc * yc).sum() / denom)


# --- reports -----------------------------------------------------------------

def fingerprint(config: dict) -> str:
    """SHA-256 of the canonical JSON form of ``config``."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass
class MetricReport:
    task: str
    metrics: dict
    n_samples: int
    seed: int
    config_fingerprint: str
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in ("forecast", "classify"):
            raise ValueError(f"task must be 'forecast' or 'classify', got {self.task!r}")
        bad = [k for k, v in self.metrics.items() if not np.isfinite(v)]
        if bad:
            raise ValueError(f"non-finite metrics: {bad}")
        self.metrics = {k: float(v) for k, v in self.metrics.items()}

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "metrics": self.metrics,
                           "n_samples": self.n_samples, "seed": self.seed,
                           "config_fingerprint": self.config_fingerprint,
                           "notes": self.notes}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")


# --- measurements --------------------------------------------------------------

def scaling_benchmark(N_list: Sequence[int], T: int = 336, D: int = 16, reps: int = 10,
                      d_k: int = 8, h: int = 2, p_missing: float = 0.5, seed: int = 0,
                      warmup: int = 1) -> list[tuple[int, float]]:
    """Mean wall-clock seconds of one MissTSM forward pass for each ``N``."""
    from .layer import MissTSMConfig, MissTSMLayer

    rows = []
    for N in N_list:
        rng = np.random.default_rng(seed)
        layer = MissTSMLayer(N, MissTSMConfig(D=D, d_k=d_k, h=h), rng)
        X = rng.normal(size=(1, T, N))
        M = (rng.random((1, T, N)) < p_missing).astype(np.float64)
        for _ in range(warmup):
            layer.forward(X, M)
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            layer.forward(X, M)
            times.append(time.perf_counter() - t0)
        rows.append((int(N), float(np.mean(times))))
    return rows


def save_benchmark_csv(rows: Iterable[tuple[int, float]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["N", "mean_forward_seconds"])
        for n, s in rows:
            w.writerow([n, f"{s:.9f}"])


@dataclass
class PropagationPoint:
    imputer: str
    fraction: float
    seed: int
    imputation_rmse: float
    downstream_mse: float


def error_propagation_study(series, imputers: Sequence[str], fit_predict: Callable,
                            fractions=(0.6, 0.7, 0.8, 0.9), seeds=(0,),
                            ratios=(0.6, 0.2, 0.2), L: int = 96, S: int = 24,
                            stride: int = 1, imputer_kwargs: Optional[dict] = None):
    """Pair imputation RMSE with downstream forecasting MSE.

    ``series`` must be fully observed (ground truth). For every imputer,
    missing fraction and seed an MCAR mask is drawn, the masked series is
    imputed, and ``fit_predict(train, val, test_context_arrays)`` is called
    with dense, z-scored splits. Its forecasts are scored against the
    ground-truth test targets. Returns ``(points, correlation)``.
    """
    from . import masking
    from .baselines import impute, imputation_rmse
    from .dataio import split, window_arrays, zscore_fit_transform

    if series.mask.any():
        raise ValueError("error_propagation_study needs a fully observed series")
    imputer_kwargs = imputer_kwargs or {}
    points = []
    for frac in fractions:
        for seed in seeds:
            mask = masking.gen_mcar(series.T, series.N, frac, seed)
            masked = series.with_mask(mask)
            for name in imputers:
                filled = impute(masked, name, **imputer_kwargs.get(name, {}))
                # a zero fraction is the perfect-imputation anchor
                rmse_ = imputation_rmse(filled, series.values, mask) if mask.any() else 0.0
                dense = filled.as_timeseries(series)
                tr, va, te = split(dense, ratios)
                (tr, va, _te), norm = zscore_fit_transform(tr, [va, te])
                _, _, truth_te = split(series, ratios)
                truth_te = norm.transform(truth_te)
                test_ctx = norm.transform(te)
                Xc = window_arrays(test_ctx, L, S, 1)
                Yt = window_arrays(truth_te, L, S, 1)
                pred = fit_predict(tr, va, (Xc[0], Xc[1]))
                points.append(PropagationPoint(name, frac, seed, rmse_, mse(pred, Yt[2])))
    corr = pearson([p.imputation_rmse for p in points], [p.downstream_mse for p in points])
    return points, corr
