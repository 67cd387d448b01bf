"""Run the five RMST-difference estimators on one dataset."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core_data import Dataset
from .curves import (DegenerateWeightsError, PositivityWarning, SurvivalCurve,
                     adjusted_ipw_survival, ipw_survival, km_survival, rmst_from_curve)
from .eif import eval_D_km, eval_eif, marginal_bundle, theta_aipw
from .glm import GlmError
from .tmle import TmleConfig, fit_initial, tmle_fit

__all__ = ["ESTIMATORS", "EstimateResult", "EstimationFailure", "estimate", "estimate_thetas"]

ESTIMATORS = ("km", "ipw", "adj-ipw", "aipw", "tmle")
_NEEDS_MODELS = {"adj-ipw", "aipw", "tmle"}

# errors that mark a replicate as failed rather than aborting a study
RECOVERABLE = (GlmError, DegenerateWeightsError, np.linalg.LinAlgError, FloatingPointError,
               ValueError)


class EstimationFailure(RuntimeError):
    pass


@dataclass
class EstimateResult:
    """One estimator's output; ``se`` is None when no influence function is used."""

    estimator: str
    theta: float
    rmst: tuple[float, float]  # (arm 0, arm 1)
    curves: tuple[SurvivalCurve, SurvivalCurve] | None = None
    se: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "theta": self.theta,
            "rmst": {"arm0": self.rmst[0], "arm1": self.rmst[1]},
            "se": self.se,
            "diagnostics": self.diagnostics,
        }
        if self.curves is not None:
            out["curves"] = {"S_arm0": self.curves[0].values.tolist(),
                             "S_arm1": self.curves[1].values.tolist(),
                             "monotone": [c.monotone for c in self.curves]}
        return out


def _if_se(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1) / math.sqrt(len(values))) if len(values) > 1 else math.nan


def _from_curves(name: str, c0: SurvivalCurve, c1: SurvivalCurve, se=None, **diag):
    r0, r1 = rmst_from_curve(c0), rmst_from_curve(c1)
    return EstimateResult(name, r1 - r0, (r0, r1), (c0, c1), se, dict(diag))


def estimate(dataset: Dataset, names=ESTIMATORS, config: TmleConfig | None = None
             ) -> dict[str, EstimateResult]:
    """Run the requested estimators, sharing the working-model fits.

    ``config`` supplies ``tau`` and the working models; it is required when
    any of ``adj-ipw``, ``aipw`` or ``tmle`` is requested.
    """
    names = tuple(names)
    unknown = set(names) - set(ESTIMATORS)
    if unknown:
        raise ValueError(f"unknown estimator(s): {', '.join(sorted(unknown))}")
    if config is None:
        raise ValueError("config with tau is required")
    tau = config.tau
    out: dict[str, EstimateResult] = {}
    d_km = None
    if "km" in names or "ipw" in names:
        d_km = eval_D_km(dataset, marginal_bundle(dataset, tau))
    if "km" in names:
        out["km"] = _from_curves("km", km_survival(dataset, 0, tau), km_survival(dataset, 1, tau),
                                 _if_se(d_km))
    if "ipw" in names:
        out["ipw"] = _from_curves("ipw", ipw_survival(dataset, 0, tau),
                                  ipw_survival(dataset, 1, tau), _if_se(d_km))
    if _NEEDS_MODELS & set(names):
        init = fit_initial(dataset, config)
        bundle = init.bundle()
        fit_diag = {"ridge_used": init.ridge_used,
                    "converged": {"h": init.h_fit.converged, "g_R": init.g_r_fit.converged,
                                  "g_A": init.g_a_fit.converged}}
        if "adj-ipw" in names:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", PositivityWarning)
                curves = [adjusted_ipw_survival(dataset, a, tau, bundle.g_a[:, a],
                                                bundle.g_r[:, a, :]) for a in (0, 1)]
            out["adj-ipw"] = _from_curves(
                "adj-ipw", *curves, None, positivity_warning=bool(caught), **fit_diag)
        if "aipw" in names:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", PositivityWarning)
                res = theta_aipw(dataset, bundle)
            eif = eval_eif(dataset, bundle, res.theta)
            out["aipw"] = EstimateResult("aipw", res.theta, res.rmst, None, _if_se(eif.values),
                                         {"positivity_warning": bool(caught), **fit_diag})
        if "tmle" in names:
            r = tmle_fit(dataset, config, init)
            diag = r.to_dict()["diagnostics"]
            diag["se_caveat"] = r.ridge_used
            out["tmle"] = EstimateResult("tmle", r.theta_hat, r.rmst_by_arm, r.survival_curves,
                                         r.se_plugin, diag)
    return {nm: out[nm] for nm in names}


def estimate_thetas(dataset: Dataset, names, config: TmleConfig) -> dict[str, float]:
    """Point estimates only; NaN for an estimator that failed."""
    try:
        res = estimate(dataset, names, config)
        return {nm: res[nm].theta for nm in names}
    except RECOVERABLE:
        pass
    # fall back to one estimator at a time so one failure does not hide the rest
    values = {}
    for nm in names:
        try:
            values[nm] = estimate(dataset, (nm,), config)[nm].theta
        except RECOVERABLE:
            values[nm] = math.nan
    return values
