import math

import numpy as np
import pytest

from misstsm import numkernel as nk
from misstsm.nn import (LayerNorm, Linear, MultiHeadSelfAttention, TransformerBlock,
                        sinusoidal_encoding)


def fd_module(module, x, rng):
    """FD check over the module's parameters and its input."""
    G = rng.normal(size=module.forward(x).shape)
    slots = module.parameters()

    def f(ps):
        module.zero_grad()
        out = module.forward(ps[0])
        dx = module.backward(G)
        return float(np.sum(out * G)), [dx] + [s.grad.copy() for s in slots]

    return nk.finite_diff_check(f, [x] + [s.value for s in slots])


@pytest.mark.parametrize("make", [
    lambda rng: Linear(4, 3, rng),
    lambda rng: LayerNorm(4),
    lambda rng: MultiHeadSelfAttention(4, 2, rng),
    lambda rng: TransformerBlock(4, 2, rng, mlp_ratio=2),
])
def test_module_gradients(make, rng):
    assert fd_module(make(rng), rng.uniform(-2, 2, size=(2, 5, 4)), rng) <= 1e-6


def test_attention_matches_naive_loop(rng):
    att = MultiHeadSelfAttention(4, 2, rng)
    x = rng.normal(size=(1, 3, 4))
    Wqkv, bqkv = att.qkv.weight.value, att.qkv.bias.value
    qkv = x[0] @ Wqkv + bqkv
    q, k, v = qkv[:, :4], qkv[:, 4:8], qkv[:, 8:]
    ctx = np.zeros((3, 4))
    for head in range(2):
        sl = slice(2 * head, 2 * head + 2)
        for i in range(3):
            logits = [float(q[i, sl] @ k[j, sl]) / math.sqrt(2) for j in range(3)]
            w = np.exp(np.array(logits) - max(logits))
            w /= w.sum()
            ctx[i, sl] = sum(w[j] * v[j, sl] for j in range(3))
    ref = ctx @ att.proj.weight.value + att.proj.bias.value
    np.testing.assert_allclose(att.forward(x)[0], ref, atol=1e-12)


def test_heads_must_divide_dim(rng):
    with pytest.raises(ValueError):
        MultiHeadSelfAttention(6, 4, rng)


def test_sinusoidal_encoding_values():
    pe = sinusoidal_encoding(5, 6)
    assert pe.shape == (5, 6)
    np.testing.assert_array_equal(pe[0, 0::2], 0.0)
    np.testing.assert_array_equal(pe[0, 1::2], 1.0)
    assert pe[3, 2] == pytest.approx(math.sin(3 / 10000 ** (2 / 6)), abs=1e-15)
    assert pe[3, 3] == pytest.approx(math.cos(3 / 10000 ** (2 / 6)), abs=1e-15)


def test_named_parameters_walk(rng):
    blk = TransformerBlock(4, 2, rng)
    names = [n for n, _ in blk.named_parameters()]
    assert "attn.qkv.weight" in names and "ffn.fc2.bias" in names
    assert len(names) == len(set(names)) == 12
    blk.set_trainable(False)
    assert not any(p.trainable for p in blk.parameters())
