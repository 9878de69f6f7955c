"""Lifetime models and failure forecasts for fleets with left-truncated, right-censored records."""

from .distributions import ConditionalLife, Family, LocationScaleParams
from .data import LifetimeObservation, RawRecord, StudyConfig, derive_observations, parse_fleet_csv, stratify
from .likelihood import FitResult, ModelSpec, fit_mle, lr_test, wald_intervals
from .nonparametric import ltrc_product_limit
from .bootstrap import BootstrapEnsemble, WeightLaw, run_bootstrap
from .individual import IntervalSpec, calibrate_interval, predict_fleet
from .population import ForecastGrid, RiskSet, forecast, subset_forecast

__version__ = "0.1.0"

__all__ = [
    "ConditionalLife",
    "Family",
    "LocationScaleParams",
    "LifetimeObservation",
    "RawRecord",
    "StudyConfig",
    "derive_observations",
    "parse_fleet_csv",
    "stratify",
    "FitResult",
    "ModelSpec",
    "fit_mle",
    "lr_test",
    "wald_intervals",
    "ltrc_product_limit",
    "BootstrapEnsemble",
    "WeightLaw",
    "run_bootstrap",
    "IntervalSpec",
    "calibrate_interval",
    "predict_fleet",
    "ForecastGrid",
    "RiskSet",
    "forecast",
    "subset_forecast",
    "__version__",
]
