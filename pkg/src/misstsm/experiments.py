"""Desk-scale end-to-end experiments on synthetic data.

These are the runs the acceptance suite and the demos share: a
forecasting task on a trending multi-period sinusoid with heavy MCAR
missingness, a frequency-discrimination classification task, and the
imputation-error propagation study.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import dataio, evaluation, masking, synthetic
from .layer import MissTSMConfig
from .numkernel import mse_masked


@dataclass
class ForecastSetup:
    T: int = 2000
    N: int = 7
    p_missing: float = 0.7
    L: int = 96
    S: int = 24
    stride: int = 4
    layer: dict = field(default_factory=lambda: dict(D=8, d_k=8, h=8))
    # two encoder and two decoder layers at width 8; two heads keep the
    # desk run inside its CPU budget
    backbone: dict = field(default_factory=lambda: dict(enc_layers=2, dec_layers=2, enc_heads=2,
                                                        dec_heads=2, enc_dim=8, dec_dim=8))
    epochs_pretrain: int = 50
    epochs_finetune: int = 50
    finetune_lr: float = 1e-3


@dataclass
class ClassifySetup:
    n_per_class: int = 400
    length: int = 32
    N: int = 8
    p_missing: float = 0.8
    layer: dict = field(default_factory=lambda: dict(D=16, d_k=8, h=4))
    backbone: dict = field(default_factory=lambda: dict(enc_layers=2, dec_layers=1, enc_heads=2,
                                                        dec_heads=2, enc_dim=16, dec_dim=16))
    epochs_pretrain: int = 10
    epochs_finetune: int = 50
    finetune_lr: float = 1e-3
    patience: int = 10


def forecast_data(seed: int, setup: ForecastSetup):
    ts = synthetic.sinusoid_trend_series(T=setup.T, N=setup.N, seed=seed)
    ts = ts.with_mask(masking.gen_mcar(ts.T, ts.N, setup.p_missing, seed + 100))
    tr, va, te = dataio.split(ts, (0.6, 0.2, 0.2))
    (tr, va, te), norm = dataio.zscore_fit_transform(tr, [va, te])
    return (dataio.window_arrays(tr, setup.L, setup.S, setup.stride),
            dataio.window_arrays(va, setup.L, setup.S, setup.stride),
            dataio.window_arrays(te, setup.L, setup.S, 1))


def run_forecast(seed: int, setup: ForecastSetup | None = None) -> dict:
    """Pretrain, fine-tune and score one seed.

    The reference predictor outputs the constant training mean of each
    variate, which is zero after z-scoring on the training split.
    """
    setup = setup or ForecastSetup()
    train, val, test = forecast_data(seed, setup)
    model = bb.MissTSMModel(setup.N, setup.L, MissTSMConfig(**setup.layer),
                            bb.BackboneConfig(**setup.backbone), seed=seed)
    cfg = bb.TrainConfig(epochs_pretrain=setup.epochs_pretrain, epochs_finetune=setup.epochs_finetune,
                         finetune_lr=setup.finetune_lr, seed=seed)
    t0 = time.perf_counter()
    pre = bb.pretrain_mae(model, train[:2], cfg, val[:2])
    fine = bb.finetune_forecast(model, train, val, cfg, setup.S)
    X, M, Y, Yobs = test
    pred = bb.predict_forecast_batch(model, X, M)
    mse = mse_masked(pred, Y, Yobs)
    baseline = mse_masked(np.zeros_like(Y), Y, Yobs)
    return {"seed": seed, "mse": mse, "mean_predictor_mse": baseline, "ratio": mse / baseline,
            "pretrain_init": pre["init"], "pretrain_final": pre["train"][-1],
            "best_epoch": fine["best_epoch"], "seconds": time.perf_counter() - t0}


def classify_data(seed: int, setup: ClassifySetup):
    segs = synthetic.frequency_classes(n_per_class=setup.n_per_class, length=setup.length,
                                       N=setup.N, seed=seed)
    segs = [dataio.LabeledSegment(
        s.series.with_mask(masking.gen_mcar(s.series.T, s.series.N, setup.p_missing,
                                            int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))),
        s.label) for i, s in enumerate(segs)]
    n = len(segs)
    a, b = int(0.6 * n), int(0.8 * n)
    (tr, va, te), _ = dataio.normalize_segments(segs[:a], [segs[a:b], segs[b:]])
    return dataio.stack_segments(tr), dataio.stack_segments(va), dataio.stack_segments(te)


def run_classify(seed: int, setup: ClassifySetup | None = None) -> dict:
    setup = setup or ClassifySetup()
    train, val, test = classify_data(seed, setup)
    model = bb.MissTSMModel(setup.N, setup.length, MissTSMConfig(**setup.layer),
                            bb.BackboneConfig(**setup.backbone), seed=seed)
    cfg = bb.TrainConfig(epochs_pretrain=setup.epochs_pretrain, epochs_finetune=setup.epochs_finetune,
                         finetune_lr=setup.finetune_lr, early_stop_patience=setup.patience, seed=seed)
    t0 = time.perf_counter()
    bb.pretrain_mae(model, train[:2], cfg, val[:2])
    fine = bb.finetune_classify(model, train, val, cfg, 3)
    probs = bb.predict_classify_batch(model, test[0], test[1])
    metrics = evaluation.classification_metrics(probs, test[2])
    return {"seed": seed, **metrics, "best_epoch": fine["best_epoch"],
            "seconds": time.perf_counter() - t0}


def linear_forecaster(train, val, test_context, L: int = 96, S: int = 24, ridge: float = 1e-3):
    """Closed-form ridge regression from the flattened context to the horizon.

    A deterministic downstream model for the propagation study; inputs are
    dense (imputed) series.
    """
    X, _, Y, _ = dataio.window_arrays(train, L, S, 1)
    A = X.reshape(len(X), -1)
    A = np.hstack([A, np.ones((len(A), 1))])
    B = Y.reshape(len(Y), -1)
    W = np.linalg.solve(A.T @ A + ridge * len(A) * np.eye(A.shape[1]), A.T @ B)
    Xc = test_context[0].reshape(len(test_context[0]), -1)
    return (np.hstack([Xc, np.ones((len(Xc), 1))]) @ W).reshape(len(Xc), S, -1)


def run_propagation(seeds=(0,), fractions=(0.6, 0.7, 0.8, 0.9), T: int = 1200, N: int = 5,
                    L: int = 48, S: int = 12):
    ts = synthetic.sinusoid_trend_series(T=T, N=N, seed=0)

    def fit_predict(tr, va, ctx):
        return linear_forecaster(tr, va, ctx, L, S)

    return evaluation.error_propagation_study(ts, ["spline", "locf", "knn"], fit_predict,
                                              fractions=fractions, seeds=seeds, L=L, S=S)


ETTH2_ENV = "MISSTSM_ETTH2_CSV"


def run_etth2(path, seed: int = 0, p_missing: float = 0.7, L: int = 336, S: int = 96,
              stride: int = 1, budget_seconds: float = 4 * 3600) -> dict:
    """Loose reproduction run on the ETTh2 csv at ``path``.

    Layer preset ``ett_mae``, default backbone and train configs, 6:2:2
    split. The result records whether it stayed inside ``budget_seconds``.
    """
    from .layer import PRESETS

    ts = dataio.load_forecast_csv(path)
    ts = ts.with_mask(masking.merge_masks(ts.mask, masking.gen_mcar(ts.T, ts.N, p_missing, seed)))
    tr, va, te = dataio.split(ts, (0.6, 0.2, 0.2), min_len=L + S)
    (tr, va, te), _ = dataio.zscore_fit_transform(tr, [va, te])
    train = dataio.window_arrays(tr, L, S, stride)
    val = dataio.window_arrays(va, L, S, stride)
    X, M, Y, Yobs = dataio.window_arrays(te, L, S, 1)
    model = bb.MissTSMModel(ts.N, L, MissTSMConfig(**PRESETS["ett_mae"]), bb.BackboneConfig(), seed=seed)
    cfg = bb.TrainConfig(seed=seed)
    t0 = time.perf_counter()
    bb.pretrain_mae(model, train[:2], cfg, val[:2])
    bb.finetune_forecast(model, train, val, cfg, S)
    mse = mse_masked(bb.predict_forecast_batch(model, X, M), Y, Yobs)
    seconds = time.perf_counter() - t0
    return {"seed": seed, "mse": mse, "seconds": seconds, "within_budget": seconds <= budget_seconds}
