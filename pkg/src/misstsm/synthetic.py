"""Deterministic synthetic datasets used by the demos, smoke tests and
desk-scale experiments."""
from __future__ import annotations

import numpy as np

from .dataio import LabeledSegment, TimeSeries


def sinusoid_trend_series(T: int = 2000, N: int = 7, seed: int = 0, noise: float = 0.05,
                          trend: float = 0.5) -> TimeSeries:
    """Fully observed multivariate series: mixed-period sinusoids plus a slow linear trend.

    Variates share two latent periods with per-variate amplitude, phase and
    trend slope, so cross-variate structure is informative.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(T, dtype=np.float64)
    periods = np.array([24.0, 60.0])
    amp = rng.uniform(0.5, 1.5, size=(N, 2))
    phase = rng.uniform(0, 2 * np.pi, size=(N, 2))
    slope = rng.uniform(-1.0, 1.0, size=N) * trend / T
    vals = np.zeros((T, N))
    for d in range(N):
        for k, per in enumerate(periods):
            vals[:, d] += amp[d, k] * np.sin(2 * np.pi * t / per + phase[d, k])
        vals[:, d] += slope[d] * t
    vals += noise * rng.normal(size=vals.shape)
    names = [f"x{d}" for d in range(N)]
    stamps = [str(i) for i in range(T)]
    return TimeSeries(vals, np.zeros_like(vals), names, stamps)


def frequency_classes(n_per_class: int = 100, length: int = 64, N: int = 6,
                      freqs=(1 / 32, 1 / 8, 1 / 3), noise: float = 0.1,
                      seed: int = 0) -> list[LabeledSegment]:
    """Segments whose class is the oscillation frequency (cycles per step).

    Each segment is one latent sinusoid with random phase, seen through
    ``N`` channels with random gain and independent noise, so only the
    frequency identifies the class.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(length, dtype=np.float64)
    segs = []
    for c, f in enumerate(freqs):
        for _ in range(n_per_class):
            gain = rng.uniform(0.7, 1.3, size=N)
            phase = rng.uniform(0, 2 * np.pi)
            vals = gain * np.sin(2 * np.pi * f * t + phase)[:, None]
            vals += noise * rng.normal(size=vals.shape)
            segs.append(LabeledSegment(TimeSeries(vals, np.zeros_like(vals)), c))
    order = rng.permutation(len(segs))
    return [segs[i] for i in order]
