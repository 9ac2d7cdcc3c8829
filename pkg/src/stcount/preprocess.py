"""Data preparation: trailing smoothing, lag selection, incidence and the
mean-variance overdispersion diagnostic."""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

from .core import CountPanel, CovariatePanel, DataError


@dataclass(frozen=True)
class Correlogram:
    lags: np.ndarray
    correlations: np.ndarray  # NaN where the overlap window has zero variance
    peaks: tuple  # local-maximum lags, highest correlation first

    @property
    def argmax(self) -> int | None:
        if np.all(np.isnan(self.correlations)):
            return None
        return int(self.lags[np.nanargmax(self.correlations)])


def trailing_mean(series, window: int) -> np.ndarray:
    """Mean of the last ``window`` values; the first ``window - 1`` entries are NaN.

    Works along the last axis, so a K x N panel is smoothed region by region.
    """
    x = np.asarray(series, dtype=float)
    n = x.shape[-1]
    if window <= 0 or window > n:
        raise ValueError(f"window must be in 1..{n}, got {window}")
    out = np.full(x.shape, np.nan)
    out[..., window - 1:] = np.lib.stride_tricks.sliding_window_view(x, window, axis=-1).mean(axis=-1)
    return out


def _pearson(a, b) -> float:
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return np.nan
    a = a - a.mean()
    b = b - b.mean()
    r = np.dot(a, b) / np.sqrt(np.dot(a, a) * np.dot(b, b))
    return float(np.clip(r, -1.0, 1.0))


def local_maxima(values) -> list:
    """Interior indices strictly above both neighbours, by decreasing value."""
    v = np.asarray(values, dtype=float)
    idx = [
        i for i in range(1, len(v) - 1)
        if np.isfinite(v[i]) and np.isfinite(v[i - 1]) and np.isfinite(v[i + 1])
        and v[i] > v[i - 1] and v[i] > v[i + 1]
    ]
    return sorted(idx, key=lambda i: (-v[i], i))


def cross_correlogram(x, y, max_lag: int) -> Correlogram:
    """Pearson correlation of ``x[t - d]`` with ``y[t]`` for ``d = 0..max_lag``.

    ``x`` plays the role of the leading series (new positives) and ``y`` the
    lagging one (hospitalisations); a positive lag ``d`` means ``x`` leads by
    ``d`` days.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d series of equal length")
    if max_lag < 0 or len(x) < max_lag + 3:
        raise ValueError("series must have length >= max_lag + 3")
    n = len(x)
    corr = np.full(max_lag + 1, np.nan)
    for d in range(max_lag + 1):
        a = x[: n - d]
        b = y[d:]
        ok = np.isfinite(a) & np.isfinite(b)
        if ok.sum() >= 3:
            corr[d] = _pearson(a[ok], b[ok])
    lags = np.arange(max_lag + 1)
    peaks = tuple(int(lags[i]) for i in local_maxima(corr))
    return Correlogram(lags, corr, peaks)


def incidence(panel: CountPanel, populations, per: float = 100000.0) -> np.ndarray:
    p = np.asarray(populations, dtype=float)
    if p.shape != (panel.K,) or np.any(p <= 0):
        raise DataError("populations must be positive, one per region")
    return per * panel.values / p[:, None]


def mean_variance_pairs(panel: CountPanel):
    """Cross-region mean and sample variance (divisor K-1) for each day.

    Returns ``(mean, var, flagged)``; ``flagged`` marks days where either
    value is zero and therefore unusable on a log-log plot.
    """
    if panel.K < 2:
        raise DataError("mean-variance pairs need at least 2 regions")
    v = panel.values.astype(float)
    m = v.mean(axis=0)
    s2 = v.var(axis=0, ddof=1)
    flagged = (m <= 0) | (s2 <= 0)
    return m, s2, flagged


def power_law_slope(mean, var, flagged=None) -> float:
    """Least-squares slope of log var on log mean over unflagged days."""
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    ok = (mean > 0) & (var > 0)
    if flagged is not None:
        ok &= ~np.asarray(flagged)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(mean[ok]), np.log(var[ok]), 1)[0])


def align_covariate(name: str, dates, values, panel: CountPanel, lag: int = 0,
                    smooth: int = 1) -> CovariatePanel:
    """Turn a raw covariate table into a lagged surface on the panel's day index.

    The table may start before the panel (pre-history fills the lagged
    days) and run past it (known future values). Smoothing is a trailing
    mean over the table's own dates, applied before the lag.
    """
    if lag < 0:
        raise DataError("covariate lag must be >= 0")
    raw = np.atleast_2d(np.asarray(values, dtype=float))
    if raw.shape[0] != panel.K:
        raise DataError(f"covariate {name!r} has {raw.shape[0]} regions, panel has {panel.K}")
    d0 = dates[0] if isinstance(dates[0], dt.date) else dt.date.fromisoformat(str(dates[0]))
    s = (panel.dates[0] - d0).days
    if s < 0:
        raise DataError(f"covariate {name!r} starts after the count panel")
    if smooth > 1:
        raw = trailing_mean(raw, smooth)
    M = raw.shape[1] - s + lag
    if M < panel.N:
        raise DataError(f"covariate {name!r} does not cover the count panel")
    out = np.full((panel.K, M), np.nan)
    j = s + np.arange(M) - lag
    ok = j >= 0
    out[:, ok] = raw[:, j[ok]]
    finite = np.all(np.isfinite(out), axis=0)
    first = int(np.argmax(finite)) if finite.any() else M
    return CovariatePanel(name, out, lag=lag, first_valid=first, regions=panel.regions,
                          start=panel.dates[0])
