"""Float64 array kernels with explicit backward passes, plus Adam.

Every differentiable op comes as a ``forward`` / ``*_backward`` pair. The
backward functions take the upstream gradient and whatever the forward
needs to recompute local derivatives; there is no tape. Layer objects in
:mod:`misstsm.nn` combine these pairs and own their parameters as
:class:`ParamSlot` instances.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

DEFAULT_ETA = -1e9


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class UndefinedMetricError(ValueError):
    """A metric was requested on an empty selection."""


class NonFiniteGradientError(FloatingPointError):
    """Raised by the optimizer when a gradient contains NaN or inf."""


@dataclass
class ParamSlot:
    """A learnable tensor with its gradient buffer and Adam moments."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]
    adam_m: np.ndarray = field(default=None)  # type: ignore[assignment]
    adam_v: np.ndarray = field(default=None)  # type: ignore[assignment]
    step_count: int = 0
    trainable: bool = True

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value)
        for name in ("grad", "adam_m", "adam_v"):
            if getattr(self, name).shape != self.value.shape:
                raise DimensionError(
                    f"{name} shape {getattr(self, name).shape} != value shape {self.value.shape}"
                )

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def adam_step(slot: ParamSlot, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> ParamSlot:
    """Bias-corrected Adam update, in place. The gradient is zeroed afterwards."""
    g = slot.grad
    if not np.all(np.isfinite(g)):
        bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
        raise NonFiniteGradientError(
            f"non-finite gradient: {bad} of {g.size} entries, shape {g.shape}"
        )
    if not slot.trainable:
        slot.zero_grad()
        return slot
    slot.step_count += 1
    slot.adam_m *= beta1
    slot.adam_m += (1.0 - beta1) * g
    slot.adam_v *= beta2
    slot.adam_v += (1.0 - beta2) * g * g
    m_hat = slot.adam_m / (1.0 - beta1 ** slot.step_count)
    v_hat = slot.adam_v / (1.0 - beta2 ** slot.step_count)
    slot.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    slot.zero_grad()
    return slot


def sum_to_shape(x: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if x.shape == tuple(shape):
        return x
    ndiff = x.ndim - len(shape)
    if ndiff > 0:
        x = x.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and x.shape[i] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x


# --- linear algebra -------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


def matmul_backward(a: np.ndarray, b: np.ndarray, dc: np.ndarray):
    da = dc @ np.swapaxes(b, -1, -2)
    db = np.swapaxes(a, -1, -2) @ dc
    return sum_to_shape(da, a.shape), sum_to_shape(db, b.shape)


def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """``x @ w + b`` where ``x`` has any number of leading axes."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"affine: input {x.shape} incompatible with weight {w.shape}")
    out = x @ w
    if b is not None:
        out = out + b
    return out


def affine_backward(x: np.ndarray, w: np.ndarray, dout: np.ndarray, has_bias: bool = True):
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dx = dout @ w.T
    dw = x2.T @ d2
    db = d2.sum(axis=0) if has_bias else None
    return dx, dw, db


def transpose(x: np.ndarray, axes: Sequence[int]) -> np.ndarray:
    return np.transpose(x, axes)


def transpose_backward(axes: Sequence[int], dout: np.ndarray) -> np.ndarray:
    return np.transpose(dout, np.argsort(axes))


# --- elementwise ----------------------------------------------------------

def add(a, b):
    return a + b


def add_backward(a_shape, b_shape, dout):
    return sum_to_shape(dout, a_shape), sum_to_shape(dout, b_shape)


def mul(a, b):
    return a * b


def mul_backward(a, b, dout):
    return sum_to_shape(dout * b, np.shape(a)), sum_to_shape(dout * a, np.shape(b))


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, dout):
    return dout * (x > 0)


_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with ``Phi`` the standard normal CDF."""
    return x * ndtr(x)


def gelu_backward(x, dout):
    pdf = np.exp(-0.5 * x * x)
    pdf *= _INV_SQRT_2PI * x
    pdf += ndtr(x)
    return dout * pdf


# --- normalization --------------------------------------------------------

def layer_norm(x, gamma, beta, eps: float = 1e-5):
    """Layer norm over the last axis. Returns ``(out, cache)``."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def layer_norm_backward(cache, gamma, dout):
    xhat, inv = cache
    d = xhat.shape[-1]
    dgamma = (dout * xhat).reshape(-1, d).sum(axis=0)
    dbeta = dout.reshape(-1, d).sum(axis=0)
    dxhat = dout * gamma
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


# --- shape ops ------------------------------------------------------------

def concat(xs: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate on the last axis."""
    return np.concatenate(xs, axis=-1)


def concat_backward(sizes: Sequence[int], dout: np.ndarray):
    return np.split(dout, np.cumsum(sizes)[:-1], axis=-1)


def slice_(x: np.ndarray, index) -> np.ndarray:
    return x[index]


def slice_backward(shape: tuple, index, dout: np.ndarray) -> np.ndarray:
    dx = np.zeros(shape)
    np.add.at(dx, index, dout)
    return dx


def reduce_sum(x, axis=None):
    return np.sum(x, axis=axis)


def reduce_sum_backward(shape, axis, dout):
    if axis is not None:
        dout = np.expand_dims(dout, axis)
    return np.broadcast_to(dout, shape).copy()


def reduce_mean(x, axis=None):
    return np.mean(x, axis=axis)


def reduce_mean_backward(shape, axis, dout):
    if axis is None:
        count = int(np.prod(shape))
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([shape[a] for a in axes]))
    return reduce_sum_backward(shape, axis, dout) / count


# --- softmax and losses ---------------------------------------------------

def softmax_with_bias(scores: np.ndarray, bias: np.ndarray, eta: float = DEFAULT_ETA):
    """Softmax of ``scores + bias`` along the last axis.

    Rows in which every bias entry is ``<= eta`` (fully masked) come back as
    all-zero rows. Returns ``(probs, degenerate)`` where ``degenerate`` is a
    boolean array over the leading axes flagging those rows.
    """
    s = scores + bias
    degenerate = np.all(np.broadcast_to(bias, s.shape) <= eta, axis=-1)
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    out = s
    if degenerate.any():
        out = np.where(degenerate[..., None], 0.0, out)
    return out, degenerate


def softmax(x: np.ndarray) -> np.ndarray:
    s = x - x.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def softmax_backward(probs: np.ndarray, dout: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the softmax input (and therefore w.r.t. the scores)."""
    g = dout * probs
    g -= probs * g.sum(axis=-1, keepdims=True)
    return g


def mse_masked(pred: np.ndarray, target: np.ndarray, observed: np.ndarray) -> float:
    """Mean squared error over entries where ``observed == 1``."""
    if pred.shape != target.shape or pred.shape != observed.shape:
        raise DimensionError(
            f"mse_masked: shapes {pred.shape}, {target.shape}, {observed.shape} differ"
        )
    n = float(np.sum(observed))
    if n == 0:
        raise UndefinedMetricError("mse_masked: no observed entries")
    diff = np.where(observed > 0, pred - target, 0.0)
    return float(np.sum(diff * diff) / n)


def mse_masked_backward(pred, target, observed):
    n = float(np.sum(observed))
    if n == 0:
        raise UndefinedMetricError("mse_masked: no observed entries")
    return np.where(observed > 0, 2.0 * (pred - target) / n, 0.0)


def cross_entropy_with_logits(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy. Returns ``(loss, dlogits)``."""
    labels = np.asarray(labels, dtype=np.int64)
    s = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(s).sum(axis=-1, keepdims=True))
    logp = s - logz
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


# --- gradient verification ------------------------------------------------

def finite_diff_check(f: Callable, params: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Compare analytic gradients against central differences.

    ``f(params)`` must return ``(value, grads)`` with one gradient array per
    parameter. Parameters are perturbed in place and restored. Returns
    ``max |g_fd - g_an| / max(1, |g_fd|, |g_an|)`` over all entries.
    """
    _, grads = f(params)
    grads = [np.array(g, dtype=np.float64, copy=True) for g in grads]
    worst = 0.0
    for p, g in zip(params, grads):
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            fp = f(params)[0]
            p[idx] = orig - h
            fm = f(params)[0]
            p[idx] = orig
            g_fd = (fp - fm) / (2.0 * h)
            g_an = g[idx]
            err = abs(g_fd - g_an) / max(1.0, abs(g_fd), abs(g_an))
            worst = max(worst, err)
    return worst
