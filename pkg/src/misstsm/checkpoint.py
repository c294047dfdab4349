"""Binary checkpoint format for models and bare MissTSM layers.

Layout (all integers little-endian)::

    8 bytes   magic  b"MTSMCKP1"
    uint64    header length H
    H bytes   UTF-8 JSON header
    repeated  uint32 name length, name bytes,
              uint32 ndim, uint64 * ndim shape,
              float64 data (little-endian, C order)

The header carries the architecture, optional normalization statistics
and any caller metadata. Tensors are written in sorted name order so
equal states serialize to equal bytes.
"""
from __future__ import annotations

import json
import struct
from typing import Optional

import numpy as np

MAGIC = b"MTSMCKP1"


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors: dict, header: dict) -> None:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def read_tensors(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<Q", take(8))
    header = json.loads(take(hlen).decode("utf-8"))
    tensors = {}
    while pos < len(blob):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return header, tensors


def save_model(path, model, normalizer=None, meta: Optional[dict] = None) -> None:
    header = {"kind": "model", "arch": model.arch(), "meta": meta or {}}
    if normalizer is not None:
        header["normalizer"] = {"mean": normalizer.mean.tolist(), "std": normalizer.std.tolist()}
    write_tensors(path, model.state(), header)


def load_model(path):
    """Return ``(model, normalizer_or_None, header)``."""
    from .backbone import MissTSMModel
    from .dataio import Normalizer

    header, tensors = read_tensors(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"{path}: holds a {header.get('kind')!r}, not a model")
    model = MissTSMModel.from_arch(header["arch"])
    model.load_state(tensors)
    norm = None
    if "normalizer" in header:
        norm = Normalizer(np.array(header["normalizer"]["mean"]), np.array(header["normalizer"]["std"]))
    return model, norm, header


def save_layer(path, layer) -> None:
    header = {"kind": "misstsm_layer", "n_variates": layer.n_variates,
              "config": layer.config.to_dict()}
    write_tensors(path, {n: p.value for n, p in layer.named_parameters()}, header)


def load_layer(path):
    from .layer import MissTSMConfig, MissTSMLayer

    header, tensors = read_tensors(path)
    if header.get("kind") != "misstsm_layer":
        raise CheckpointError(f"{path}: holds a {header.get('kind')!r}, not a MissTSM layer")
    layer = MissTSMLayer(header["n_variates"], MissTSMConfig(**header["config"]),
                         np.random.default_rng(0))
    for name, p in layer.named_parameters():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        p.value[...] = tensors[name]
    return layer
