"""Spatio-temporal models for areal count panels: endemic-epidemic
autoregression, multivariate covariance GLMs and CAR-AR(1) Bayesian models,
with preprocessing, simulation and a hold-out forecast benchmark."""

__version__ = "0.1.0"
FORMAT_VERSIONS = {"panel-csv": 1, "forecast-csv": 1, "report-json": 1}

from .core import (Adjacency, CountPanel, CovariatePanel, DataError, ForecastSet, OffsetSpec,  # noqa: E402
                   StcountError, population_fractions, row_normalize)

__all__ = [
    "Adjacency", "CountPanel", "CovariatePanel", "DataError", "ForecastSet", "OffsetSpec",
    "StcountError", "population_fractions", "row_normalize", "__version__",
]
