"""Masked-autoencoder transformer backbone with forecasting and
classification heads, and the pretrain / fine-tune loops.

The model input is the MissTSM layer output (direct mode) by default. With
``use_misstsm=False`` the raw (already imputed) ``T x N`` grid is projected
straight into the encoder, which is the impute-then-model path.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import numpy as np

from . import numkernel as nk
from .layer import MissTSMConfig, MissTSMLayer, tfi_ablation_mode
from .nn import LayerNorm, Linear, Module, TransformerBlock, sinusoidal_encoding
from .numkernel import ParamSlot

log = logging.getLogger(__name__)


@dataclass
class BackboneConfig:
    enc_layers: int = 2
    dec_layers: int = 2
    enc_heads: int = 8
    dec_heads: int = 4
    enc_dim: int = 8
    dec_dim: int = 32
    mlp_ratio: int = 4
    class_hidden: int = 64

    def validate(self) -> None:
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ValueError("attention head count must divide model dim")
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ValueError("need at least one encoder and one decoder layer")


@dataclass
class TrainConfig:
    pretrain_lr: float = 1e-3
    finetune_lr: float = 1e-4
    epochs_pretrain: int = 50
    epochs_finetune: int = 100
    early_stop_patience: int = 3
    batch_size: int = 16
    mae_time_mask_ratio: float = 0.5
    freeze_encoder: bool = False
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 <= self.mae_time_mask_ratio < 1.0:
            raise ValueError("mae_time_mask_ratio must lie in [0, 1)")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; the model has been rolled back to ``last_good``."""

    def __init__(self, msg, last_good):
        super().__init__(msg)
        self.last_good = last_good


class MissTSMModel(Module):
    """MissTSM layer + MAE encoder/decoder + optional task heads."""

    def __init__(self, n_variates: int, context_len: int,
                 layer_cfg: Optional[MissTSMConfig] = None,
                 backbone_cfg: Optional[BackboneConfig] = None,
                 use_misstsm: bool = True, seed: int = 0):
        self.n_variates = n_variates
        self.context_len = context_len
        self.use_misstsm = use_misstsm
        self.layer_cfg = layer_cfg or MissTSMConfig()
        self.backbone_cfg = backbone_cfg or BackboneConfig()
        self.backbone_cfg.validate()
        bc = self.backbone_cfg
        rng = np.random.default_rng(seed)
        if use_misstsm:
            self.embed = MissTSMLayer(n_variates, self.layer_cfg, rng)
            in_dim = self.embed.output_dim
        else:
            self.embed = None
            in_dim = n_variates
        self.in_proj = Linear(in_dim, bc.enc_dim, rng)
        self.encoder = [TransformerBlock(bc.enc_dim, bc.enc_heads, rng, bc.mlp_ratio)
                        for _ in range(bc.enc_layers)]
        self.enc_norm = LayerNorm(bc.enc_dim)
        self.dec_embed = Linear(bc.enc_dim, bc.dec_dim, rng)
        self.mask_token = ParamSlot(rng.normal(0.0, 0.02, size=bc.dec_dim))
        self.decoder = [TransformerBlock(bc.dec_dim, bc.dec_heads, rng, bc.mlp_ratio)
                        for _ in range(bc.dec_layers)]
        self.dec_norm = LayerNorm(bc.dec_dim)
        self.recon = Linear(bc.dec_dim, n_variates, rng)
        self.forecast_head: Optional[Linear] = None
        self.class_fc: Optional[Linear] = None
        self.class_out: Optional[Linear] = None
        self.horizon: Optional[int] = None
        self.n_classes: Optional[int] = None
        self.tfi_ablated = False
        self._head_rng = np.random.default_rng(seed + 7919)
        self._pe_enc = sinusoidal_encoding(context_len, bc.enc_dim)
        self._pe_dec = sinusoidal_encoding(context_len, bc.dec_dim)
        self._enc_cache = None
        self._dec_cache = None

    # --- heads ---------------------------------------------------------

    def add_forecast_head(self, horizon: int) -> None:
        self.horizon = horizon
        self.forecast_head = Linear(self.context_len * self.backbone_cfg.enc_dim,
                                    horizon * self.n_variates, self._head_rng)

    def add_classify_head(self, n_classes: int) -> None:
        self.n_classes = n_classes
        hidden = self.backbone_cfg.class_hidden
        self.class_fc = Linear(self.backbone_cfg.enc_dim, hidden, self._head_rng)
        self.class_out = Linear(hidden, n_classes, self._head_rng)

    def encoder_parameters(self) -> list[ParamSlot]:
        mods = [self.in_proj, *self.encoder, self.enc_norm]
        if self.embed is not None:
            mods.insert(0, self.embed)
        return [p for m in mods for p in m.parameters()]

    def ablate_tfi(self) -> None:
        if self.embed is None:
            raise ValueError("model has no MissTSM layer")
        tfi_ablation_mode(self.embed)
        self.tfi_ablated = True

    # --- encoder / decoder --------------------------------------------

    def _tokens(self, X, M):
        if self.embed is not None:
            return self.embed.forward(X, M)
        return np.where(np.asarray(M) == 0, X, 0.0)

    def encode(self, X, M, keep_idx=None):
        B, L, _ = X.shape
        tok = self.in_proj.forward(self._tokens(X, M)) + self._pe_enc[:L]
        if keep_idx is not None:
            tok = tok[np.arange(B)[:, None], keep_idx]
        h = tok
        for blk in self.encoder:
            h = blk.forward(h)
        out = self.enc_norm.forward(h)
        self._enc_cache = (B, L, keep_idx)
        return out

    def encode_backward(self, dout):
        B, L, keep_idx = self._enc_cache
        d = self.enc_norm.backward(dout)
        for blk in reversed(self.encoder):
            d = blk.backward(d)
        if keep_idx is not None:
            full = np.zeros((B, L, d.shape[-1]))
            full[np.arange(B)[:, None], keep_idx] = d
            d = full
        d = self.in_proj.backward(d)
        if self.embed is not None:
            self.embed.backward(d)

    def decode(self, enc_out, keep_idx, L):
        B = enc_out.shape[0]
        vis = self.dec_embed.forward(enc_out)
        if keep_idx is None:
            h = vis
        else:
            h = np.broadcast_to(self.mask_token.value, (B, L, vis.shape[-1])).copy()
            h[np.arange(B)[:, None], keep_idx] = vis
        h = h + self._pe_dec[:L]
        for blk in self.decoder:
            h = blk.forward(h)
        out = self.recon.forward(self.dec_norm.forward(h))
        self._dec_cache = keep_idx
        return out

    def decode_backward(self, dout):
        keep_idx = self._dec_cache
        d = self.dec_norm.backward(self.recon.backward(dout))
        for blk in reversed(self.decoder):
            d = blk.backward(d)
        if keep_idx is None:
            dvis = d
        else:
            B = d.shape[0]
            rows = np.arange(B)[:, None]
            dvis = d[rows, keep_idx]
            hidden = np.ones(d.shape[:2], dtype=bool)
            hidden[rows, keep_idx] = False
            self.mask_token.grad += d[hidden].sum(axis=0)
        return self.dec_embed.backward(dvis)

    # --- task losses (forward + backward) ------------------------------

    def pretrain_loss(self, X, M, keep_idx=None, backward: bool = True) -> float:
        """Reconstruction MSE over originally observed entries."""
        B, L, _ = X.shape
        enc = self.encode(X, M, keep_idx)
        rec = self.decode(enc, keep_idx, L)
        observed = (np.asarray(M) == 0).astype(np.float64)
        target = np.where(observed > 0, X, 0.0)
        loss = nk.mse_masked(rec, target, observed)
        if backward:
            d = nk.mse_masked_backward(rec, target, observed)
            self.encode_backward(self.decode_backward(d))
        return loss

    def forecast(self, X, M):
        B, L, _ = X.shape
        enc = self.encode(X, M)
        flat = enc.reshape(B, -1)
        return self.forecast_head.forward(flat).reshape(B, self.horizon, self.n_variates)

    def forecast_loss(self, X, M, Y, Y_obs, backward: bool = True) -> float:
        pred = self.forecast(X, M)
        target = np.where(Y_obs > 0, Y, 0.0)
        loss = nk.mse_masked(pred, target, Y_obs)
        if backward:
            d = nk.mse_masked_backward(pred, target, Y_obs)
            B = X.shape[0]
            dflat = self.forecast_head.backward(d.reshape(B, -1))
            self.encode_backward(dflat.reshape(B, self.context_len, -1))
        return loss

    def class_logits(self, X, M):
        enc = self.encode(X, M)
        self._pool_len = enc.shape[1]
        pooled = enc.mean(axis=1)
        self._hid = self.class_fc.forward(pooled)
        return self.class_out.forward(nk.relu(self._hid))

    def classify_loss(self, X, M, labels, backward: bool = True) -> float:
        logits = self.class_logits(X, M)
        loss, dlogits = nk.cross_entropy_with_logits(logits, labels)
        if backward:
            dh = nk.relu_backward(self._hid, self.class_out.backward(dlogits))
            dpooled = self.class_fc.backward(dh)
            L = self._pool_len
            self.encode_backward(np.repeat(dpooled[:, None, :] / L, L, axis=1))
        return loss

    # --- state ----------------------------------------------------------

    def state(self) -> dict:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_state(self, state: dict) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state lacks parameters: {sorted(missing)}")
        for name, p in params.items():
            if state[name].shape != p.value.shape:
                raise nk.DimensionError(
                    f"{name}: checkpoint shape {state[name].shape} != model shape {p.value.shape}")
            p.value[...] = state[name]

    def arch(self) -> dict:
        return {
            "n_variates": self.n_variates,
            "context_len": self.context_len,
            "use_misstsm": self.use_misstsm,
            "misstsm": self.layer_cfg.to_dict(),
            "backbone": asdict(self.backbone_cfg),
            "horizon": self.horizon,
            "n_classes": self.n_classes,
            "tfi_ablated": self.tfi_ablated,
        }

    @classmethod
    def from_arch(cls, arch: dict, seed: int = 0) -> "MissTSMModel":
        model = cls(arch["n_variates"], arch["context_len"], MissTSMConfig(**arch["misstsm"]),
                    BackboneConfig(**arch["backbone"]), arch["use_misstsm"], seed)
        if arch.get("horizon"):
            model.add_forecast_head(arch["horizon"])
        if arch.get("n_classes"):
            model.add_classify_head(arch["n_classes"])
        if arch.get("tfi_ablated"):
            model.ablate_tfi()
        return model


# --- training ----------------------------------------------------------------

def _as_arrays(windows):
    """Accept a list of :class:`~misstsm.dataio.WindowPair` or a tuple of arrays."""
    if isinstance(windows, tuple):
        return windows
    from .dataio import stack_windows
    return stack_windows(windows)


def sample_keep_indices(rng: np.random.Generator, B: int, L: int, ratio: float):
    """Per-sample sorted indices of visible time steps, or ``None`` for ratio 0."""
    n_mask = int(round(ratio * L))
    if n_mask == 0:
        return None
    n_keep = L - n_mask
    order = np.argsort(rng.random((B, L)), axis=1)[:, :n_keep]
    return np.sort(order, axis=1)


class _JsonlLog:
    def __init__(self, path):
        self._fh = open(path, "a", encoding="utf-8") if path else None
        self._t0 = time.perf_counter()

    def write(self, phase, epoch, split, loss):
        rec = {"phase": phase, "epoch": epoch, "split": split, "loss": loss,
               "seconds": round(time.perf_counter() - self._t0, 6)}
        log.debug("%s", rec)
        if self._fh:
            self._fh.write(json.dumps(rec) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()


def _step(params: Sequence[ParamSlot], lr: float) -> None:
    for p in params:
        nk.adam_step(p, lr)


def _check_finite(loss, model, last_good, what):
    if not np.isfinite(loss):
        model.load_state(last_good)
        raise TrainingDiverged(f"non-finite {what} loss", last_good)


def _batches(rng, n, batch_size):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def pretrain_mae(model: MissTSMModel, train, cfg: TrainConfig, val=None,
                 log_path=None) -> dict:
    """Self-supervised reconstruction training.

    Each step hides a random ``mae_time_mask_ratio`` of time steps from the
    encoder and reconstructs every position. Returns ``{"train": [...],
    "val": [...]}`` with one loss per epoch, plus the loss at initialization
    under ``"init"``.
    """
    cfg.validate()
    X, M = _as_arrays(train)[:2]
    Xv, Mv = _as_arrays(val)[:2] if val is not None else (None, None)
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    logger = _JsonlLog(log_path)
    history = {"train": [], "val": []}
    history["init"] = _eval_pretrain(model, X, M, cfg)
    last_good = model.state()
    try:
        for epoch in range(1, cfg.epochs_pretrain + 1):
            total, count = 0.0, 0
            for idx in _batches(rng, len(X), cfg.batch_size):
                keep = sample_keep_indices(rng, len(idx), X.shape[1], cfg.mae_time_mask_ratio)
                loss = model.pretrain_loss(X[idx], M[idx], keep)
                _check_finite(loss, model, last_good, "pretrain")
                _step(params, cfg.pretrain_lr)
                total += loss * len(idx)
                count += len(idx)
            last_good = model.state()
            history["train"].append(total / count)
            logger.write("pretrain", epoch, "train", total / count)
            if Xv is not None and len(Xv):
                vl = _eval_pretrain(model, Xv, Mv, cfg)
                history["val"].append(vl)
                logger.write("pretrain", epoch, "val", vl)
    finally:
        logger.close()
    return history


def _eval_pretrain(model, X, M, cfg, batch_size=256):
    rng = np.random.default_rng(cfg.seed + 104729)
    total, count = 0.0, 0
    for i in range(0, len(X), batch_size):
        xb, mb = X[i:i + batch_size], M[i:i + batch_size]
        keep = sample_keep_indices(rng, len(xb), X.shape[1], cfg.mae_time_mask_ratio)
        n_obs = float((mb == 0).sum())
        if n_obs == 0:
            continue
        total += model.pretrain_loss(xb, mb, keep, backward=False) * n_obs
        count += n_obs
    return total / count if count else float("nan")


def reset_optimizer_state(params: Sequence[ParamSlot]) -> None:
    for p in params:
        p.adam_m[...] = 0.0
        p.adam_v[...] = 0.0
        p.step_count = 0
        p.zero_grad()


def _finetune(model, heads, train_fn, eval_fn, n_train, cfg, phase, log_path):
    params = model.encoder_parameters() + [p for h in heads for p in h.parameters()]
    reset_optimizer_state(params)
    flags = [p.trainable for p in params]
    if cfg.freeze_encoder:
        for p in model.encoder_parameters():
            p.trainable = False
    rng = np.random.default_rng(cfg.seed + 1)
    logger = _JsonlLog(log_path)
    history = {"train": [], "val": [], "best_epoch": 0}
    best = eval_fn()
    best_state = model.state()
    history["init_val"] = best
    bad = 0
    try:
        for epoch in range(1, cfg.epochs_finetune + 1):
            total, count = 0.0, 0
            for idx in _batches(rng, n_train, cfg.batch_size):
                loss = train_fn(idx)
                _check_finite(loss, model, best_state, phase)
                _step(params, cfg.finetune_lr)
                total += loss * len(idx)
                count += len(idx)
            history["train"].append(total / count)
            logger.write(phase, epoch, "train", total / count)
            vl = eval_fn()
            history["val"].append(vl)
            logger.write(phase, epoch, "val", vl)
            if vl < best:
                best, best_state, bad = vl, model.state(), 0
                history["best_epoch"] = epoch
            else:
                bad += 1
                if bad >= cfg.early_stop_patience:
                    break
    finally:
        logger.close()
        for p, flag in zip(params, flags):
            p.trainable = flag
        model.zero_grad()
    model.load_state(best_state)
    history["best_val"] = best
    return history


def finetune_forecast(model: MissTSMModel, train, val, cfg: TrainConfig, horizon: int,
                      log_path=None) -> dict:
    """Fit a linear head on the flattened encoder output; early-stops on val masked MSE.

    The model ends at the epoch with the lowest validation loss.
    """
    cfg.validate()
    X, M, Y, Yo = _as_arrays(train)
    Xv, Mv, Yv, Yov = _as_arrays(val) if val is not None else (X, M, Y, Yo)
    if model.forecast_head is None or model.horizon != horizon:
        model.add_forecast_head(horizon)

    def train_fn(idx):
        return model.forecast_loss(X[idx], M[idx], Y[idx], Yo[idx])

    def eval_fn():
        return evaluate_forecast(model, Xv, Mv, Yv, Yov)

    return _finetune(model, [model.forecast_head], train_fn, eval_fn, len(X), cfg, "finetune_forecast", log_path)


def finetune_classify(model: MissTSMModel, train, val, cfg: TrainConfig, n_classes: int,
                      log_path=None) -> dict:
    """Mean-pooled encoder -> 64-unit ReLU layer -> logits, trained with cross-entropy.

    ``train``/``val`` are ``(X, M, labels)`` tuples. Early stopping monitors
    validation cross-entropy.
    """
    cfg.validate()
    X, M, yl = train
    Xv, Mv, yv = val if val is not None else train
    if model.class_out is None or model.n_classes != n_classes:
        model.add_classify_head(n_classes)

    def train_fn(idx):
        return model.classify_loss(X[idx], M[idx], yl[idx])

    def eval_fn():
        probs = predict_classify_batch(model, Xv, Mv)
        p = probs[np.arange(len(yv)), np.asarray(yv, dtype=int)]
        return float(-np.mean(np.log(np.maximum(p, 1e-300))))

    return _finetune(model, [model.class_fc, model.class_out], train_fn, eval_fn, len(X), cfg,
                     "finetune_classify", log_path)


# --- inference ---------------------------------------------------------------

def predict_forecast_batch(model: MissTSMModel, X, M, batch_size: int = 256) -> np.ndarray:
    outs = [model.forecast(X[i:i + batch_size], M[i:i + batch_size])
            for i in range(0, len(X), batch_size)]
    return np.concatenate(outs) if outs else np.zeros((0, model.horizon, model.n_variates))


def predict_forecast(model: MissTSMModel, context) -> np.ndarray:
    """Forecast ``S x N`` from one context (a TimeSeries or ``(values, mask)``)."""
    values, mask = (context.values, context.mask) if hasattr(context, "values") else context
    return model.forecast(np.asarray(values)[None], np.asarray(mask)[None])[0]


def predict_classify_batch(model: MissTSMModel, X, M, batch_size: int = 256) -> np.ndarray:
    outs = [nk.softmax(model.class_logits(X[i:i + batch_size], M[i:i + batch_size]))
            for i in range(0, len(X), batch_size)]
    return np.concatenate(outs)


def predict_classify(model: MissTSMModel, segment) -> np.ndarray:
    """Class probabilities for one segment (LabeledSegment, TimeSeries or arrays)."""
    series = getattr(segment, "series", segment)
    values, mask = (series.values, series.mask) if hasattr(series, "values") else series
    return predict_classify_batch(model, np.asarray(values)[None], np.asarray(mask)[None])[0]


def evaluate_forecast(model, X, M, Y, Y_obs) -> float:
    """Masked MSE of forecasts over observed target entries."""
    pred = predict_forecast_batch(model, X, M)
    return nk.mse_masked(pred, np.where(Y_obs > 0, Y, 0.0), Y_obs)
