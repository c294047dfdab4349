"""CSV ingestion, normalization, windowing and chronological splits."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SENTINEL = 0.0


class ParseError(ValueError):
    """Malformed input file; the message names the row and column."""


@dataclass
class TimeSeries:
    """``T x N`` values with an aligned missingness mask (1 = missing)."""

    values: np.ndarray
    mask: np.ndarray
    variate_names: list = field(default_factory=list)
    timestamps: Optional[list] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.values.shape != self.mask.shape or self.values.ndim != 2:
            raise ValueError(f"values {self.values.shape} and mask {self.mask.shape} must be equal 2D shapes")
        if not np.isin(self.mask, (0.0, 1.0)).all():
            raise ValueError("mask entries must be 0 or 1")
        self.values = np.where(self.mask > 0, SENTINEL, self.values)
        if not np.isfinite(self.values).all():
            raise ValueError("non-finite value at an observed entry")
        if not self.variate_names:
            self.variate_names = [f"v{i + 1}" for i in range(self.values.shape[1])]

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    @property
    def observed(self) -> np.ndarray:
        return 1.0 - self.mask

    def slice(self, start: int, stop: int) -> "TimeSeries":
        ts = None if self.timestamps is None else list(self.timestamps[start:stop])
        return TimeSeries(self.values[start:stop].copy(), self.mask[start:stop].copy(),
                          list(self.variate_names), ts)

    def with_mask(self, mask) -> "TimeSeries":
        return replace(self, mask=np.asarray(mask, dtype=np.float64))


@dataclass
class WindowPair:
    context: TimeSeries
    target: np.ndarray
    target_observed: np.ndarray


@dataclass
class LabeledSegment:
    series: TimeSeries
    label: int


def _is_missing(cell: str, missing_token: str) -> bool:
    c = cell.strip()
    return c == missing_token or c == "" or c.lower() == "nan"


def load_forecast_csv(path, missing_token: str = "") -> TimeSeries:
    """Read ``timestamp, v1, ..., vN`` rows. Empty or "nan" cells are missing."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = rows[0]
    if len(header) < 2:
        raise ParseError(f"{path}: need a timestamp column and at least one variate")
    names = [h.strip() for h in header[1:]]
    n = len(names)
    values = np.zeros((len(rows) - 1, n))
    mask = np.zeros((len(rows) - 1, n))
    stamps = []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != n + 1:
            raise ParseError(f"{path}: row {r} has {len(row)} fields, expected {n + 1}")
        stamps.append(row[0])
        for c, cell in enumerate(row[1:]):
            if _is_missing(cell, missing_token):
                mask[r - 2, c] = 1.0
                continue
            try:
                values[r - 2, c] = float(cell)
            except ValueError:
                raise ParseError(f"{path}: row {r}, column {c + 2} ({names[c]}): "
                                 f"non-numeric cell {cell!r}") from None
            if not np.isfinite(values[r - 2, c]):
                raise ParseError(f"{path}: row {r}, column {c + 2}: non-finite value {cell!r}")
    return TimeSeries(values, mask, names, stamps)


def save_forecast_csv(ts: TimeSeries, path) -> None:
    """Write in the format :func:`load_forecast_csv` reads; missing cells stay empty."""
    stamps = ts.timestamps if ts.timestamps is not None else [str(i) for i in range(ts.T)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", *ts.variate_names])
        for t in range(ts.T):
            w.writerow([stamps[t], *("" if ts.mask[t, d] else repr(float(ts.values[t, d]))
                                     for d in range(ts.N))])


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    def transform(self, ts: TimeSeries) -> TimeSeries:
        vals = np.where(ts.mask > 0, SENTINEL, (ts.values - self.mean) / self.std)
        return replace(ts, values=vals)

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean


def zscore_fit_transform(train: TimeSeries, others: Sequence[TimeSeries] = ()):
    """Fit per-variate mean / population std on observed training entries.

    Returns ``([train_norm, *others_norm], normalizer)``. A variate with
    fewer than two observed entries or zero spread gets std 1.
    """
    obs = train.mask == 0
    counts = obs.sum(axis=0)
    for d, c in enumerate(counts):
        if c == 0:
            raise ValueError(f"variate {train.variate_names[d]!r} has no observed training entries")
    x = np.where(obs, train.values, 0.0)
    mean = x.sum(axis=0) / counts
    var = (np.where(obs, train.values - mean, 0.0) ** 2).sum(axis=0) / counts
    std = np.sqrt(var)
    std = np.where((counts < 2) | (std == 0), 1.0, std)
    norm = Normalizer(mean, std)
    return [norm.transform(train)] + [norm.transform(o) for o in others], norm


def make_windows(ts: TimeSeries, L: int, S: int, stride: int = 1) -> list[WindowPair]:
    """Contiguous (context, target) pairs; ``(T - L - S) // stride + 1`` of them."""
    if ts.T < L + S:
        warnings.warn(f"series of length {ts.T} too short for L={L}, S={S}; no windows")
        return []
    out = []
    for start in range(0, ts.T - L - S + 1, stride):
        ctx = ts.slice(start, start + L)
        tgt = ts.values[start + L:start + L + S].copy()
        tobs = 1.0 - ts.mask[start + L:start + L + S]
        out.append(WindowPair(ctx, tgt, tobs))
    return out


def window_arrays(ts: TimeSeries, L: int, S: int, stride: int = 1):
    """Array form of :func:`make_windows`: ``(X, M, Y, Y_obs)`` stacked on axis 0."""
    n = (ts.T - L - S) // stride + 1 if ts.T >= L + S else 0
    if n <= 0:
        warnings.warn(f"series of length {ts.T} too short for L={L}, S={S}; no windows")
        z = np.zeros((0, L, ts.N))
        return z, z.copy(), np.zeros((0, S, ts.N)), np.zeros((0, S, ts.N))
    starts = np.arange(n) * stride
    ci = starts[:, None] + np.arange(L)
    ti = starts[:, None] + L + np.arange(S)
    return ts.values[ci], ts.mask[ci], ts.values[ti], 1.0 - ts.mask[ti]


def stack_windows(windows: Sequence[WindowPair]):
    X = np.stack([w.context.values for w in windows])
    M = np.stack([w.context.mask for w in windows])
    Y = np.stack([w.target for w in windows])
    Yo = np.stack([w.target_observed for w in windows])
    return X, M, Y, Yo


def split(ts: TimeSeries, ratios=(0.6, 0.2, 0.2), min_len: int = 0):
    """Chronological ``(train, val, test)`` slices covering the whole series."""
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise ValueError(f"split ratios must be three numbers summing to 1, got {ratios}")
    n_train = int(ts.T * ratios[0])
    n_val = int(ts.T * ratios[1])
    bounds = [0, n_train, n_train + n_val, ts.T]
    parts = [ts.slice(bounds[i], bounds[i + 1]) for i in range(3)]
    for name, p in zip(("train", "val", "test"), parts):
        if p.T < min_len:
            raise ValueError(f"{name} split has {p.T} rows, fewer than the required {min_len}")
    return tuple(parts)


def load_classification(path, length: Optional[int] = None) -> list[LabeledSegment]:
    """Read a long CSV with columns ``series_id, step, label, v1..vN``.

    Rows are grouped by ``series_id`` and ordered by ``step``. If ``length``
    is given, segments are truncated or padded at the end, padding marked
    missing.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header[:3] != ["series_id", "step", "label"] or len(header) < 4:
        raise ParseError(f"{path}: header must start with series_id, step, label and name >= 1 variate")
    names = header[3:]
    n = len(names)
    groups: dict = {}
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != n + 3:
            raise ParseError(f"{path}: row {r} has {len(row)} fields, expected {n + 3}")
        sid = row[0]
        try:
            step = int(row[1])
            label = int(row[2])
        except ValueError:
            raise ParseError(f"{path}: row {r}: step and label must be integers") from None
        vals, miss = [], []
        for c, cell in enumerate(row[3:]):
            if _is_missing(cell, ""):
                vals.append(0.0)
                miss.append(1.0)
            else:
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(f"{path}: row {r}, column {c + 4}: non-numeric cell {cell!r}") from None
                miss.append(0.0)
        g = groups.setdefault(sid, {"label": label, "rows": []})
        if g["label"] != label:
            raise ParseError(f"{path}: series {sid!r} has conflicting labels {g['label']} and {label}")
        g["rows"].append((step, vals, miss))
    out = []
    for sid, g in groups.items():
        g["rows"].sort(key=lambda x: x[0])
        values = np.array([v for _, v, _ in g["rows"]])
        mask = np.array([m for _, _, m in g["rows"]])
        if length is not None:
            values, mask = pad_or_truncate(values, mask, length)
        out.append(LabeledSegment(TimeSeries(values, mask, list(names)), g["label"]))
    return out


def pad_or_truncate(values, mask, length: int):
    T, N = values.shape
    if T >= length:
        return values[:length], mask[:length]
    pad = length - T
    return (np.vstack([values, np.zeros((pad, N))]),
            np.vstack([mask, np.ones((pad, N))]))


def save_classification(segments: Sequence[LabeledSegment], path) -> None:
    names = segments[0].series.variate_names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series_id", "step", "label", *names])
        for i, seg in enumerate(segments):
            s = seg.series
            for t in range(s.T):
                w.writerow([i, t, seg.label, *("" if s.mask[t, d] else repr(float(s.values[t, d]))
                                                for d in range(s.N))])


def stack_segments(segments: Sequence[LabeledSegment]):
    X = np.stack([s.series.values for s in segments])
    M = np.stack([s.series.mask for s in segments])
    y = np.array([s.label for s in segments], dtype=np.int64)
    return X, M, y


def normalize_segments(train: Sequence[LabeledSegment], others: Sequence[Sequence[LabeledSegment]] = ()):
    """Per-variate z-score fitted on observed entries of all training segments."""
    stacked = TimeSeries(np.vstack([s.series.values for s in train]),
                         np.vstack([s.series.mask for s in train]),
                         list(train[0].series.variate_names))
    _, norm = zscore_fit_transform(stacked)

    def apply(segs):
        return [LabeledSegment(norm.transform(s.series), s.label) for s in segs]

    return [apply(train)] + [apply(o) for o in others], norm
