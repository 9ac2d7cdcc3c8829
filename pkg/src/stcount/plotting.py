"""Figure rendering for report paths. Everything draws to files with the Agg backend."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "lines.linewidth": 1.2,
    "savefig.bbox": "tight",
}

# fixed metadata keeps repeated renders byte-stable
_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, format="png", metadata=_META)
    plt.close(fig)
    return path


def correlogram_figure(corr, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.bar(corr.lags, np.nan_to_num(corr.correlations), width=0.6, color="0.4")
        for lag in corr.peaks[:2]:
            ax.axvline(lag, color="C3", ls="--", lw=0.8)
            ax.annotate(f"lag {lag}", (lag, 1.0), xycoords=("data", "axes fraction"),
                        textcoords="offset points", xytext=(3, -12), color="C3")
        ax.set_xlabel("lag (days)")
        ax.set_ylabel("correlation")
        return _save(fig, path)


def mean_variance_figure(mean, var, flagged, path, slope=None):
    ok = ~np.asarray(flagged, dtype=bool)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.loglog(np.asarray(mean)[ok], np.asarray(var)[ok], "o", ms=3, color="0.2")
        lims = np.array([np.min(np.asarray(mean)[ok]), np.max(np.asarray(mean)[ok])]) if ok.any() else None
        if lims is not None and lims[0] > 0:
            ax.loglog(lims, lims, "-", color="C0", alpha=0.6, label="variance = mean")
        if slope is not None and np.isfinite(slope):
            ax.set_title(f"log-log slope {slope:.2f}")
        ax.set_xlabel("cross-region mean")
        ax.set_ylabel("cross-region variance")
        if lims is not None:
            ax.legend()
        return _save(fig, path)


def forecast_figure(history, forecast, path, observed=None, max_regions: int = 8):
    """Last weeks of each region with the forecast mean and 95% band."""
    K = min(len(forecast.regions), max_regions)
    ncols = 2 if K > 1 else 1
    nrows = int(np.ceil(K / ncols))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(6.4, 1.6 * nrows + 0.6), squeeze=False,
                                 sharex=True)
        tail = min(history.N, 28)
        xh = np.arange(-tail, 0)
        xf = np.arange(forecast.horizon)
        for k in range(K):
            ax = axes.flat[k]
            ax.plot(xh, history.values[k, -tail:], color="0.3")
            ax.fill_between(xf, forecast.lo95[k], forecast.hi95[k], color="C0", alpha=0.25, lw=0)
            ax.plot(xf, forecast.mean[k], color="C0")
            if observed is not None:
                ax.plot(xf, observed[k, :forecast.horizon], "k.", ms=4)
            ax.set_title(str(forecast.regions[k]), fontsize=8)
        for ax in list(axes.flat)[K:]:
            ax.set_visible(False)
        fig.supxlabel("days relative to forecast origin")
        return _save(fig, path)


def bench_figure(report, path):
    """RMSEp by horizon for each model."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for i, row in enumerate(report.results):
            if row.error is not None or row.rmse_p is None:
                continue
            h = np.arange(1, len(row.rmse_p) + 1)
            ax.plot(h, row.rmse_p, marker="o", ms=3, color=f"C{i % 10}", label=row.label)
        ax.set_xlabel("horizon (days)")
        ax.set_ylabel("RMSEp")
        ax.legend()
        return _save(fig, path)
