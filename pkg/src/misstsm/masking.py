"""Synthetic missingness: MCAR and sinusoidally modulated (periodic) masks.

Masks are float arrays of 0/1 with 1 = missing.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

SCHEMES = ("mcar", "periodic")

# Interval presets for frequency (cycles per step) and phase.
FREQ_PRESETS = {"default": (0.2, 0.8), "high": (0.6, 0.9), "low": (0.1, 0.3)}
PHASE_PRESETS = {"default": (0.0, 2 * np.pi), "positive_half": (0.0, np.pi),
                 "negative_half": (np.pi, 2 * np.pi)}


@dataclass
class MaskSpec:
    scheme: str = "mcar"
    p: float = 0.7
    alpha: float = 0.5
    freq_range: Tuple[float, float] = FREQ_PRESETS["default"]
    phase_range: Tuple[float, float] = PHASE_PRESETS["default"]
    seed: int = 0

    def __post_init__(self):
        self.scheme = self.scheme.lower()
        self.freq_range = tuple(float(x) for x in self.freq_range)
        self.phase_range = tuple(float(x) for x in self.phase_range)
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        lo, hi = self.freq_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"freq_range must satisfy 0 < lo <= hi <= 1, got {self.freq_range}")
        lo, hi = self.phase_range
        if not (0.0 <= lo <= hi <= 2 * np.pi + 1e-12):
            raise ValueError(f"phase_range must lie within [0, 2*pi], got {self.phase_range}")

    def generate(self, T: int, N: int) -> np.ndarray:
        if self.scheme == "mcar":
            return gen_mcar(T, N, self.p, self.seed)
        return gen_periodic(T, N, self)


def gen_mcar(T: int, N: int, p: float, seed: int) -> np.ndarray:
    """Independent Bernoulli(p) missingness."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must lie in [0, 1], got {p}")
    rng = np.random.default_rng(seed)
    return (rng.random((T, N)) < p).astype(np.float64)


def periodic_probability(t, p, alpha, freq, phase):
    """Instantaneous missing probability, clamped to [0, 1]."""
    return np.clip(p + alpha * (1.0 - p) * np.sin(2 * np.pi * freq * t + phase), 0.0, 1.0)


def variate_rng(seed: int, d: int) -> np.random.Generator:
    """Independent stream for variate ``d``, derived by hashing ``(seed, d)``."""
    return np.random.default_rng(np.random.SeedSequence([seed, d]))


def gen_periodic(T: int, N: int, spec: MaskSpec) -> np.ndarray:
    """Missingness whose probability oscillates per variate with its own frequency and phase."""
    if spec.scheme != "periodic":
        raise ValueError("gen_periodic needs a MaskSpec with scheme='periodic'")
    t = np.arange(T, dtype=np.float64)
    out = np.empty((T, N))
    for d in range(N):
        rng = variate_rng(spec.seed, d)
        freq = rng.uniform(*spec.freq_range)
        phase = rng.uniform(*spec.phase_range)
        prob = periodic_probability(t, spec.p, spec.alpha, freq, phase)
        out[:, d] = rng.random(T) < prob
    return out


def merge_masks(native: np.ndarray, synthetic: np.ndarray) -> np.ndarray:
    """Missing if missing in either."""
    native = np.asarray(native)
    synthetic = np.asarray(synthetic)
    if native.shape != synthetic.shape:
        raise ValueError(f"mask shapes differ: {native.shape} vs {synthetic.shape}")
    return ((native > 0) | (synthetic > 0)).astype(np.float64)


def save_mask(mask: np.ndarray, path) -> None:
    """Header-free CSV of 0/1 integers."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(mask).astype(int):
            w.writerow(row.tolist())


def load_mask(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise ValueError(f"{path}: ragged mask rows")
    arr = np.array(rows, dtype=np.int64)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{path}: mask entries must be 0 or 1")
    return arr.astype(np.float64)
