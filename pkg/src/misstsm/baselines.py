"""Classical imputers for impute-then-model comparisons.

All imputers leave observed entries untouched and return a fully dense
:class:`ImputedSeries`. Time is the integer row index.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import make_interp_spline

from .dataio import TimeSeries


@dataclass
class ImputedSeries:
    values: np.ndarray
    original_mask: np.ndarray
    provenance: dict = field(default_factory=dict)

    def as_timeseries(self, like: TimeSeries) -> TimeSeries:
        """Dense :class:`TimeSeries` (mask all zero) carrying ``like``'s names and stamps."""
        return TimeSeries(self.values.copy(), np.zeros_like(self.values),
                          list(like.variate_names), like.timestamps)


def _observed_columns(ts: TimeSeries):
    obs = ts.mask == 0
    for d in range(ts.N):
        if not obs[:, d].any():
            raise ValueError(f"variate {ts.variate_names[d]!r} has no observed entries")
    return obs


def spline_interpolate(t_obs, y_obs, t_query, order: int = 2) -> np.ndarray:
    """Evaluate the degree-``order`` interpolating spline through ``(t_obs, y_obs)``.

    ``t_obs`` must be strictly increasing. Queries outside
    ``[t_obs[0], t_obs[-1]]`` take the nearest endpoint value. With too few
    points for the requested degree the degree drops (linear, then constant).
    """
    t_obs = np.asarray(t_obs, dtype=np.float64)
    y_obs = np.asarray(y_obs, dtype=np.float64)
    t_query = np.asarray(t_query, dtype=np.float64)
    if t_obs.size == 0:
        raise ValueError("spline_interpolate needs at least one observed point")
    out = np.empty_like(t_query)
    lo, hi = t_query <= t_obs[0], t_query >= t_obs[-1]
    out[lo] = y_obs[0]
    out[hi] = y_obs[-1]
    inside = ~(lo | hi)
    k = min(order, t_obs.size - 1)
    if inside.any():
        out[inside] = make_interp_spline(t_obs, y_obs, k=k)(t_query[inside])
    return out


def spline_impute(ts: TimeSeries, order: int = 2) -> ImputedSeries:
    """Per-variate interpolating spline of degree ``order`` over the row index.

    See :func:`spline_interpolate` for the edge and fallback rules.
    """
    if order not in (1, 2, 3):
        raise ValueError(f"spline order must be 1, 2 or 3, got {order}")
    obs = _observed_columns(ts)
    out = ts.values.copy()
    for d in range(ts.N):
        idx = np.flatnonzero(obs[:, d])
        miss = np.flatnonzero(~obs[:, d])
        if miss.size:
            out[miss, d] = spline_interpolate(idx, ts.values[idx, d], miss, order)
    return ImputedSeries(out, ts.mask.copy(), {"method": "spline", "order": order})


def locf_impute(ts: TimeSeries) -> ImputedSeries:
    """Carry the last observation forward; leading gaps take the first observation."""
    obs = _observed_columns(ts)
    T = ts.T
    # index of the most recent observed row at or before t, per column
    last = np.where(obs, np.arange(T)[:, None], -1)
    np.maximum.accumulate(last, axis=0, out=last)
    first = obs.argmax(axis=0)
    src = np.where(last < 0, first[None, :], last)
    out = np.take_along_axis(ts.values, src, axis=0)
    out = np.where(obs, ts.values, out)
    return ImputedSeries(out, ts.mask.copy(), {"method": "locf"})


def knn_impute(ts: TimeSeries, k: int = 10) -> ImputedSeries:
    """Fill each missing entry from the ``k`` nearest rows that observe that variate.

    Distance between rows uses only co-observed variates, scaled by
    ``sqrt(N / n_co_observed)``; rows with nothing in common are not
    neighbours. Ties go to the lower time index. With no usable neighbour
    the variate's observed mean is used.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    obs = _observed_columns(ts)
    T, N = ts.values.shape
    x = np.where(obs, ts.values, 0.0)
    o = obs.astype(np.float64)
    col_mean = x.sum(axis=0) / o.sum(axis=0)
    out = ts.values.copy()
    for t in np.flatnonzero(~obs.all(axis=1)):
        both = o * o[t]
        co = both.sum(axis=1)
        diff = (x - x[t]) * both
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.sqrt((diff * diff).sum(axis=1) * N / co)
        usable = co > 0
        usable[t] = False
        for j in np.flatnonzero(~obs[t]):
            cand = np.flatnonzero(usable & obs[:, j])
            if cand.size == 0:
                out[t, j] = col_mean[j]
                continue
            # stable sort keeps lower time index first among equal distances
            nearest = cand[np.argsort(dist[cand], kind="stable")[:k]]
            out[t, j] = ts.values[nearest, j].mean()
    return ImputedSeries(out, ts.mask.copy(), {"method": "knn", "k": k})


IMPUTERS = {"spline": spline_impute, "locf": locf_impute, "knn": knn_impute}


def impute(ts: TimeSeries, method: str, **kwargs) -> ImputedSeries:
    try:
        fn = IMPUTERS[method]
    except KeyError:
        raise ValueError(f"unknown imputation method {method!r}; choose from {sorted(IMPUTERS)}") from None
    return fn(ts, **kwargs)


def imputation_rmse(imputed: ImputedSeries | np.ndarray, ground_truth: np.ndarray,
                    synthetic_mask: np.ndarray) -> float:
    """RMSE over synthetically removed entries."""
    vals = imputed.values if isinstance(imputed, ImputedSeries) else np.asarray(imputed)
    sel = np.asarray(synthetic_mask) > 0
    if not sel.any():
        raise ValueError("synthetic mask selects no entries")
    diff = vals[sel] - np.asarray(ground_truth)[sel]
    return float(np.sqrt(np.mean(diff * diff)))
