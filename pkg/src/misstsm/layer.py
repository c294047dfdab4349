"""The MissTSM layer: per-token embedding, 2D positional encoding and
missing-feature-aware attention (MFAA) with one learnable query.

Shapes follow ``(batch, T, N)`` for inputs; a 2D ``(T, N)`` input is
treated as a batch of one. Mask convention: ``1`` = missing, ``0`` =
observed.

The functional helpers (:func:`tfi_embed`, :func:`mfaa_score`, ...) are
the per-time-step reference path. :class:`MissTSMLayer` is the vectorized
trainable version and is checked against them in the tests.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import numkernel as nk
from .nn import Module, glorot
from .numkernel import ParamSlot

MODES = ("direct", "wrapper")


class ConfigError(ValueError):
    pass


@dataclass
class MissTSMConfig:
    """Layer sizes.

    ``D`` is the token embedding size, ``d_k`` the per-head projection size,
    ``h`` the number of heads and ``D_o`` the output size of the head-mixing
    matrix (defaults to ``D``).
    """

    D: int = 8
    d_k: int = 8
    h: int = 8
    D_o: Optional[int] = None
    mode: str = "direct"
    eta: float = nk.DEFAULT_ETA
    all_missing_policy: str = "zero_latent"

    def __post_init__(self):
        if self.D_o is None:
            self.D_o = self.D
        self.validate()

    def validate(self) -> None:
        if self.D <= 0 or self.D % 4:
            raise ConfigError(f"embedding size D={self.D} must be a positive multiple of 4")
        if self.d_k <= 0 or self.h <= 0 or self.D_o <= 0:
            raise ConfigError("d_k, h and D_o must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.eta <= -1e8:
            raise ConfigError(f"eta must be <= -1e8, got {self.eta}")
        if self.all_missing_policy != "zero_latent":
            raise ConfigError(f"unknown all_missing_policy {self.all_missing_policy!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# Per-dataset defaults (base model MAE) for the layer.
PRESETS = {
    "ett_mae": dict(D=8, d_k=8, h=8),
    "weather_mae": dict(D=64, d_k=32, h=8),
    "classification": dict(D=32, d_k=32, h=16),
    "physionet": dict(D=64, d_k=64, h=2),
}


# --- functional reference path ---------------------------------------------

def tfi_embed(X, M, tfi_weight, tfi_bias):
    """Map each observed scalar to ``tfi_weight * x + tfi_bias``; missing tokens get zeros.

    ``tfi_weight`` has shape ``(D, 1)``. Output has the input shape plus a
    trailing ``D`` axis. Values under the mask are never read.
    """
    X = np.asarray(X, dtype=np.float64)
    observed = np.asarray(M) == 0
    x0 = np.where(observed, X, 0.0)
    h = x0[..., None] * tfi_weight[:, 0] + tfi_bias
    return np.where(observed[..., None], h, 0.0)


def pos_encode_2d(T: int, N: int, D: int) -> np.ndarray:
    """2D sinusoidal table of shape ``(T, N, D)``.

    The first ``D/2`` channels encode the time index, the last ``D/2`` the
    variate index, each as interleaved sin/cos pairs with wavelength base
    ``10000 ** (4i / D)``.
    """
    if D % 4:
        raise ConfigError(f"2D positional encoding needs D divisible by 4, got {D}")
    q = D // 4
    denom = 10000.0 ** (4.0 * np.arange(q) / D)
    t = np.arange(T, dtype=np.float64)[:, None] / denom
    d = np.arange(N, dtype=np.float64)[:, None] / denom
    pe = np.zeros((T, N, D))
    pe[:, :, 0:D // 2:2] = np.sin(t)[:, None, :]
    pe[:, :, 1:D // 2:2] = np.cos(t)[:, None, :]
    pe[:, :, D // 2::2] = np.sin(d)[None, :, :]
    pe[:, :, D // 2 + 1::2] = np.cos(d)[None, :, :]
    return pe


def mfaa_score(Qhat, Khat_t, M_t, eta: float = nk.DEFAULT_ETA):
    """Masked attention weights of the query over the ``N`` variates at one step.

    Returns ``(A_t, degenerate)``; a fully missing step gives a zero row and
    ``degenerate=True``.
    """
    d_k = Qhat.shape[-1]
    scores = (Qhat @ Khat_t.T).reshape(-1) / np.sqrt(d_k)
    A, degenerate = nk.softmax_with_bias(scores, eta * np.asarray(M_t, dtype=np.float64), eta)
    return A, bool(degenerate)


def mfaa_latent(A_t, Vhat_t):
    """Attention-weighted sum of the value rows, shape ``(d_k,)``."""
    return A_t @ Vhat_t


def multihead_mfaa(query, Z_t, M_t, params: dict, eta: float = nk.DEFAULT_ETA):
    """One time step through every head, concatenated and mixed by ``Wo``.

    ``params`` holds ``Wq``, ``Wk``, ``Wv`` of shape ``(h, D, d_k)`` and
    ``Wo`` of shape ``(h*d_k, D_o)``.
    """
    latents = []
    for i in range(params["Wq"].shape[0]):
        qh = query @ params["Wq"][i]
        kh = Z_t @ params["Wk"][i]
        vh = Z_t @ params["Wv"][i]
        A, _ = mfaa_score(qh, kh, M_t, eta)
        latents.append(mfaa_latent(A, vh))
    return np.concatenate(latents) @ params["Wo"]


def misstsm_layer(X, M, params: dict, config: MissTSMConfig):
    """Single-series reference implementation looping over time steps."""
    T, N = X.shape
    Z = tfi_embed(X, M, params["tfi_weight"], params["tfi_bias"]) + pos_encode_2d(T, N, config.D)
    out = np.stack([
        multihead_mfaa(params["query"], Z[t], M[t], params, config.eta) for t in range(T)
    ])
    if config.mode == "wrapper":
        out = out @ params["out_proj_weight"] + params["out_proj_bias"]
    return out


# --- trainable layer -------------------------------------------------------

class MissTSMLayer(Module):
    """Vectorized, trainable MissTSM layer.

    ``forward(X, M)`` returns ``(B, T, N)`` in wrapper mode or
    ``(B, T, D_o)`` in direct mode. ``last_degenerate`` holds the
    ``(B, T)`` flags of fully missing steps from the most recent call.
    """

    def __init__(self, n_variates: int, config: MissTSMConfig, rng: np.random.Generator):
        cfg = config
        self.config = cfg
        self.n_variates = n_variates
        D, dk, h = cfg.D, cfg.d_k, cfg.h
        self.tfi_weight = ParamSlot(rng.normal(0.0, 1.0, size=(D, 1)))
        self.tfi_bias = ParamSlot(rng.normal(0.0, 0.1, size=D))
        self.query = ParamSlot(rng.normal(0.0, 1.0, size=(1, D)))
        self.Wq = ParamSlot(glorot(rng, D, dk, (h, D, dk)))
        self.Wk = ParamSlot(glorot(rng, D, dk, (h, D, dk)))
        self.Wv = ParamSlot(glorot(rng, D, dk, (h, D, dk)))
        self.Wo = ParamSlot(glorot(rng, h * dk, cfg.D_o))
        if cfg.mode == "wrapper":
            self.out_proj_weight = ParamSlot(glorot(rng, cfg.D_o, n_variates))
            self.out_proj_bias = ParamSlot(np.zeros(n_variates))
        self._pe_cache: dict = {}
        self._cache = None
        self.last_degenerate = None

    @property
    def output_dim(self) -> int:
        return self.n_variates if self.config.mode == "wrapper" else self.config.D_o

    def arrays(self) -> dict:
        """Current parameter values keyed by name (shared, not copied)."""
        return {name: slot.value for name, slot in self.named_parameters()}

    def _pe(self, T, N):
        key = (T, N)
        if key not in self._pe_cache:
            self._pe_cache[key] = pos_encode_2d(T, N, self.config.D)
        return self._pe_cache[key]

    def forward(self, X, M):
        X = np.asarray(X, dtype=np.float64)
        M = np.asarray(M)
        squeeze = X.ndim == 2
        if squeeze:
            X, M = X[None], M[None]
        B, T, N = X.shape
        if N != self.n_variates:
            raise nk.DimensionError(f"layer built for {self.n_variates} variates, got {N}")
        cfg = self.config
        D, dk, h = cfg.D, cfg.d_k, cfg.h
        observed = M == 0
        x0 = np.where(observed, X, 0.0)
        H = np.where(observed[..., None], x0[..., None] * self.tfi_weight.value[:, 0]
                     + self.tfi_bias.value, 0.0)
        Z = H + self._pe(T, N)
        # Keys are only ever contracted with the shared query, and values only
        # with the attention weights, so both projections are folded:
        #   score[n, i] = Z[n] . (Wk[i] @ qhat[i]),  L[i] = (A[i] @ Z) @ Wv[i]
        qhat = np.einsum("d,hdk->hk", self.query.value[0], self.Wq.value)
        u = np.einsum("hdk,hk->dh", self.Wk.value, qhat)
        scale = 1.0 / np.sqrt(dk)
        scores = np.swapaxes(Z @ u, -1, -2) * scale
        bias = (cfg.eta * (~observed))[:, :, None, :]
        A, degenerate = nk.softmax_with_bias(scores, bias, cfg.eta)
        pooled = A @ Z
        lat = np.einsum("bthd,hdk->bthk", pooled, self.Wv.value).reshape(B, T, h * dk)
        out = lat @ self.Wo.value
        mixed = out
        if cfg.mode == "wrapper":
            out = out @ self.out_proj_weight.value + self.out_proj_bias.value
        self.last_degenerate = degenerate.any(axis=-1)
        self._cache = (x0, observed, Z, qhat, u, scale, A, pooled, lat, mixed, squeeze)
        return out[0] if squeeze else out

    def backward(self, dout):
        x0, observed, Z, qhat, u, scale, A, pooled, lat, mixed, squeeze = self._cache
        if squeeze:
            dout = dout[None]
        cfg = self.config
        D, dk, h = cfg.D, cfg.d_k, cfg.h
        B, T, N = x0.shape
        if cfg.mode == "wrapper":
            dx, dw, db = nk.affine_backward(mixed, self.out_proj_weight.value, dout)
            self.out_proj_weight.grad += dw
            self.out_proj_bias.grad += db
            dout = dx
        dlat_flat, dWo, _ = nk.affine_backward(lat, self.Wo.value, dout, has_bias=False)
        self.Wo.grad += dWo
        dlat = dlat_flat.reshape(B, T, h, dk)
        self.Wv.grad += np.einsum("bthd,bthk->hdk", pooled, dlat)
        dpooled = np.einsum("bthk,hdk->bthd", dlat, self.Wv.value)
        dA = dpooled @ np.swapaxes(Z, -1, -2)
        dZ = np.swapaxes(A, -1, -2) @ dpooled
        dS = nk.softmax_backward(A, dA) * scale
        du = np.einsum("btnd,bthn->dh", Z, dS)
        dZ += np.swapaxes(dS, -1, -2) @ u.T
        self.Wk.grad += np.einsum("dh,hk->hdk", du, qhat)
        dqhat = np.einsum("hdk,dh->hk", self.Wk.value, du)
        q = self.query.value[0]
        self.Wq.grad += np.einsum("d,hk->hdk", q, dqhat)
        self.query.grad += np.einsum("hdk,hk->d", self.Wq.value, dqhat)[None, :]
        dH = np.where(observed[..., None], dZ, 0.0)
        self.tfi_weight.grad += np.einsum("btnd,btn->d", dH, x0)[:, None]
        self.tfi_bias.grad += dH.reshape(-1, D).sum(axis=0)
        # inputs are data, never trained; no gradient w.r.t. X is needed
        return None


def tfi_ablation_mode(layer: MissTSMLayer) -> MissTSMLayer:
    """Freeze the token embedding to the identity broadcast (weight 1, bias 0).

    Modifies ``layer`` in place and returns it.
    """
    layer.tfi_weight.value[...] = 1.0
    layer.tfi_bias.value[...] = 0.0
    layer.tfi_weight.trainable = False
    layer.tfi_bias.trainable = False
    layer.tfi_weight.zero_grad()
    layer.tfi_bias.zero_grad()
    return layer
