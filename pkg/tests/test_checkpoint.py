import struct

import numpy as np
import pytest

from misstsm import backbone as bb
from misstsm import checkpoint
from misstsm.dataio import Normalizer
from misstsm.layer import MissTSMConfig, MissTSMLayer


def tiny_model(seed=0):
    m = bb.MissTSMModel(3, 8, MissTSMConfig(D=8, d_k=4, h=2),
                        bb.BackboneConfig(enc_layers=1, dec_layers=1, enc_heads=2, dec_heads=2,
                                          enc_dim=8, dec_dim=8), seed=seed)
    m.add_forecast_head(4)
    return m


def test_file_layout(tmp_path):
    p = tmp_path / "t.ckpt"
    checkpoint.write_tensors(p, {"b": np.arange(3.0), "a": np.ones((2, 2))}, {"k": 1})
    raw = p.read_bytes()
    assert raw[:8] == checkpoint.MAGIC
    (hlen,) = struct.unpack("<Q", raw[8:16])
    assert raw[16:16 + hlen] == b'{"k":1}'
    pos = 16 + hlen
    (nlen,) = struct.unpack("<I", raw[pos:pos + 4])
    assert raw[pos + 4:pos + 4 + nlen] == b"a"  # sorted order
    header, tensors = checkpoint.read_tensors(p)
    assert header == {"k": 1}
    np.testing.assert_array_equal(tensors["b"], [0, 1, 2])


def test_corrupt_files_rejected(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOTACKPT" + b"\0" * 8)
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.read_tensors(p)
    checkpoint.write_tensors(p, {"w": np.ones(10)}, {})
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(checkpoint.CheckpointError, match="truncated"):
        checkpoint.read_tensors(p)


def test_model_round_trip_predictions_identical(tmp_path, rng):
    m = tiny_model()
    norm = Normalizer(np.array([1.0, 2.0, 3.0]), np.array([0.5, 1.0, 2.0]))
    p = tmp_path / "m.ckpt"
    checkpoint.save_model(p, m, norm, {"note": "x"})
    m2, norm2, header = checkpoint.load_model(p)
    X = rng.normal(size=(5, 8, 3))
    M = (rng.random((5, 8, 3)) < 0.5).astype(float)
    assert np.array_equal(bb.predict_forecast_batch(m, X, M), bb.predict_forecast_batch(m2, X, M))
    np.testing.assert_array_equal(norm2.std, norm.std)
    assert header["meta"] == {"note": "x"}
    checkpoint.save_model(tmp_path / "again.ckpt", m2, norm2, {"note": "x"})
    assert (tmp_path / "again.ckpt").read_bytes() == p.read_bytes()


def test_ablated_model_round_trip(tmp_path):
    m = tiny_model()
    m.ablate_tfi()
    checkpoint.save_model(tmp_path / "a.ckpt", m)
    m2, _, _ = checkpoint.load_model(tmp_path / "a.ckpt")
    assert not m2.embed.tfi_weight.trainable


def test_layer_round_trip(tmp_path, rng):
    layer = MissTSMLayer(4, MissTSMConfig(D=8, d_k=4, h=2, mode="wrapper"), rng)
    checkpoint.save_layer(tmp_path / "l.ckpt", layer)
    header, _ = checkpoint.read_tensors(tmp_path / "l.ckpt")
    assert {k: header["config"][k] for k in ("D", "d_k", "h", "D_o", "mode", "eta")} == \
        {"D": 8, "d_k": 4, "h": 2, "D_o": 8, "mode": "wrapper", "eta": -1e9}
    back = checkpoint.load_layer(tmp_path / "l.ckpt")
    X = rng.normal(size=(6, 4))
    M = (rng.random((6, 4)) < 0.3).astype(float)
    assert np.array_equal(back.forward(X, M), layer.forward(X, M))
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.load_model(tmp_path / "l.ckpt")
