"""Restricted mean survival time contrasts for two-arm trials in discrete time."""

from .core_data import DataValidationError, Dataset, SubjectRecord, read_csv, validate_dataset
from .curves import km_censoring, km_survival, rmst_from_curve, theta_km
from .estimators import ESTIMATORS, EstimateResult, estimate
from .inference import bootstrap, wald_ci
from .tmle import TmleConfig, TmleResult, tmle_fit

__version__ = "0.1.0"

__all__ = [
    "DataValidationError",
    "Dataset",
    "SubjectRecord",
    "read_csv",
    "validate_dataset",
    "km_survival",
    "km_censoring",
    "rmst_from_curve",
    "theta_km",
    "ESTIMATORS",
    "EstimateResult",
    "estimate",
    "bootstrap",
    "wald_ci",
    "TmleConfig",
    "TmleResult",
    "tmle_fit",
    "__version__",
]
