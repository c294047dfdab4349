"""Layer objects built on :mod:`misstsm.numkernel`.

Each layer caches what its last ``forward`` needs, and ``backward`` adds
parameter gradients into the owning :class:`ParamSlot` objects before
returning the gradient w.r.t. the layer input. One forward per backward.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import numkernel as nk
from .numkernel import ParamSlot


class Module:
    """Minimal parameter container; children are discovered by attribute."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, ParamSlot]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, ParamSlot):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, ParamSlot):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[ParamSlot]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag


def glorot(rng: np.random.Generator, n_in: int, n_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (n_in, n_out))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = ParamSlot(glorot(rng, n_in, n_out))
        self.bias = ParamSlot(np.zeros(n_out)) if bias else None
        self._x = None

    def forward(self, x):
        self._x = x
        return nk.affine(x, self.weight.value, None if self.bias is None else self.bias.value)

    def backward(self, dout):
        dx, dw, db = nk.affine_backward(self._x, self.weight.value, dout, self.bias is not None)
        self.weight.grad += dw
        if self.bias is not None:
            self.bias.grad += db
        return dx


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = ParamSlot(np.ones(dim))
        self.beta = ParamSlot(np.zeros(dim))
        self._eps = eps
        self._cache = None

    def forward(self, x):
        out, self._cache = nk.layer_norm(x, self.gamma.value, self.beta.value, self._eps)
        return out

    def backward(self, dout):
        dx, dg, db = nk.layer_norm_backward(self._cache, self.gamma.value, dout)
        self.gamma.grad += dg
        self.beta.grad += db
        return dx


class MultiHeadSelfAttention(Module):
    """Standard scaled dot-product self-attention over the token axis."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"attention heads ({heads}) must divide model dim ({dim})")
        self._h = heads
        self._hd = dim // heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self._cache = None

    def forward(self, x):
        B, L, dim = x.shape
        h, hd = self._h, self._hd
        qkv = self.qkv.forward(x).reshape(B, L, 3, h, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scale = 1.0 / np.sqrt(hd)
        att = nk.softmax(nk.matmul(q, np.swapaxes(k, -1, -2)) * scale)
        ctx = nk.matmul(att, v)
        self._cache = (q, k, v, att, scale)
        out = ctx.transpose(0, 2, 1, 3).reshape(B, L, dim)
        return self.proj.forward(out)

    def backward(self, dout):
        q, k, v, att, scale = self._cache
        B, h, L, hd = q.shape
        dctx = self.proj.backward(dout).reshape(B, L, h, hd).transpose(0, 2, 1, 3)
        datt, dv = nk.matmul_backward(att, v, dctx)
        ds = nk.softmax_backward(att, datt) * scale
        dq = ds @ k
        dk = np.swapaxes(ds, -1, -2) @ q
        dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, L, 3 * h * hd)
        return self.qkv.backward(dqkv)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self._pre = None

    def forward(self, x):
        self._pre = self.fc1.forward(x)
        return self.fc2.forward(nk.gelu(self._pre))

    def backward(self, dout):
        return self.fc1.backward(nk.gelu_backward(self._pre, self.fc2.backward(dout)))


class TransformerBlock(Module):
    """Pre-norm block: ``x + attn(ln(x))`` then ``x + ffn(ln(x))``."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, mlp_ratio * dim, rng)

    def forward(self, x):
        x = x + self.attn.forward(self.ln1.forward(x))
        return x + self.ffn.forward(self.ln2.forward(x))

    def backward(self, dout):
        dx = dout + self.ln2.backward(self.ffn.backward(dout))
        return dx + self.ln1.backward(self.attn.backward(dx))


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    """Classic 1D sine/cosine table of shape ``(length, dim)``."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(0, dim, 2, dtype=np.float64)
    freq = 1.0 / 10000.0 ** (i / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return pe
