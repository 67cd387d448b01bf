"""Product-limit and inverse-weighted survival curves, RMST and arm contrasts."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .core_data import Dataset
from .glm import LogisticFit, predict_logit_grid

__all__ = [
    "PositivityWarning",
    "DegenerateWeightsError",
    "SurvivalCurve",
    "CensoringCurve",
    "risk_table",
    "km_survival",
    "km_censoring",
    "survival_from_hazard",
    "censoring_from_hazard",
    "marginal_survival",
    "rmst_from_curve",
    "theta_km",
    "ipw_survival",
    "theta_ipw_unadjusted",
    "adjusted_ipw_survival",
    "theta_ipw_adjusted",
    "check_tau",
]

POSITIVITY_FLOOR = 1e-6


class PositivityWarning(UserWarning):
    """Inverse weights with denominators below the positivity floor."""


class DegenerateWeightsError(ValueError):
    """The censoring survival estimate reached 0 before it was needed."""


@dataclass(frozen=True, eq=False)
class SurvivalCurve:
    """``values[t] = S(t)`` for ``t = 0..tau-1``."""

    arm: int
    values: np.ndarray
    source: str

    @property
    def tau(self) -> int:
        return len(self.values)

    @property
    def monotone(self) -> bool:
        return bool(np.all(np.diff(self.values) <= 1e-12))


@dataclass(frozen=True, eq=False)
class CensoringCurve:
    """``values[t] = G(t) = P(C >= t)`` for ``t = 0..tau``."""

    arm: int
    values: np.ndarray
    source: str


def check_tau(dataset: Dataset, tau: int) -> None:
    if tau < 1:
        raise ValueError(f"tau must be >=1, got {tau}")
    if tau > dataset.k_max:
        raise ValueError(f"tau={tau} exceeds K={dataset.k_max}")


def risk_table(dataset: Dataset, arm: int) -> dict[str, np.ndarray]:
    """Counts by time ``m = 0..K`` within one arm.

    Keys: ``at_risk`` (``sum I_m``), ``events`` (``sum L_m``), ``censor_risk``
    (``sum J_m``) and ``censored`` (``sum R_m``).  ``at_risk[0]`` and
    ``events[0]`` are unused.
    """
    k = dataset.k_max
    sel = dataset.a == arm
    tt, d = dataset.t_tilde[sel], dataset.delta[sel]
    ev = np.bincount(tt[d == 1], minlength=k + 1)
    ce = np.bincount(tt[d == 0], minlength=k + 1)
    by_time = np.bincount(tt, minlength=k + 1)
    at_least = by_time[::-1].cumsum()[::-1]  # #{T~ >= m}
    return {
        "at_risk": at_least,
        "events": ev,
        "censor_risk": at_least - ev,
        "censored": ce,
    }


def _ratio(num, den):
    out = np.zeros(len(num))
    ok = den > 0
    out[ok] = num[ok] / den[ok]
    return out


def km_survival(dataset: Dataset, arm: int, tau: int) -> SurvivalCurve:
    """Kaplan-Meier survival ``S(t)``, ``t = 0..tau-1``; empty risk sets add nothing."""
    check_tau(dataset, tau)
    tab = risk_table(dataset, arm)
    if tab["at_risk"][0] == 0:
        raise ValueError(f"arm {arm} has no subjects")
    haz = _ratio(tab["events"], tab["at_risk"])
    haz[0] = 0.0
    return SurvivalCurve(arm, survival_from_hazard(haz[:tau]), "KM")


def km_censoring(dataset: Dataset, arm: int, tau: int) -> CensoringCurve:
    """Product-limit estimate of ``G(t) = P(C >= t)``, ``t = 0..tau``."""
    check_tau(dataset, tau)
    tab = risk_table(dataset, arm)
    if tab["at_risk"][0] == 0:
        raise ValueError(f"arm {arm} has no subjects")
    haz = _ratio(tab["censored"], tab["censor_risk"])
    return CensoringCurve(arm, censoring_from_hazard(haz[:tau]), "KM")


def survival_from_hazard(hazard) -> np.ndarray:
    """``S(t) = prod_{m=1..t} (1 - h(m))`` along the last axis.

    ``hazard[..., m]`` is the hazard at time ``m``; the ``m = 0`` slot is
    ignored, so the output has the same shape with ``S(0) = 1``.
    """
    h = np.asarray(hazard, dtype=float)
    s = np.empty_like(h)
    s[..., 0] = 1.0
    if h.shape[-1] > 1:
        s[..., 1:] = np.cumprod(1.0 - h[..., 1:], axis=-1)
    return s


def censoring_from_hazard(hazard) -> np.ndarray:
    """``G(t) = prod_{m=0..t-1} (1 - g(m))``; one more slot than the input."""
    g = np.asarray(hazard, dtype=float)
    out = np.empty(g.shape[:-1] + (g.shape[-1] + 1,))
    out[..., 0] = 1.0
    out[..., 1:] = np.cumprod(1.0 - g, axis=-1)
    return out


def marginal_survival(hazard_grid, arm: int, source: str = "substitution") -> SurvivalCurve:
    """Average of conditional survival curves over the sample of covariates.

    ``hazard_grid[i, m]`` is ``h(m, arm, W_i)`` for every subject ``i`` in
    the sample, whatever arm the subject was actually assigned to.
    """
    s = survival_from_hazard(hazard_grid)
    return SurvivalCurve(arm, s.mean(axis=0), source)


def rmst_from_curve(curve, tau: int | None = None) -> float:
    """``sum_{t=0..tau-1} S(t)``."""
    values = curve.values if isinstance(curve, SurvivalCurve) else np.asarray(curve, dtype=float)
    tau = len(values) if tau is None else tau
    if tau > len(values):
        raise ValueError(f"curve defined on 0..{len(values) - 1}, need 0..{tau - 1}")
    return float(np.sum(values[:tau]))


def theta_km(dataset: Dataset, tau: int) -> float:
    return rmst_from_curve(km_survival(dataset, 1, tau)) - rmst_from_curve(km_survival(dataset, 0, tau))


def _observed_through(dataset: Dataset, tau: int) -> np.ndarray:
    # J_t per subject: 1{R_0..R_{t-1} = 0, L_1..L_t = 0}, t = 0..tau-1
    t = np.arange(tau)
    tt, d = dataset.t_tilde[:, None], dataset.delta[:, None]
    return ((tt > t) | ((tt == t) & (d == 0))).astype(float)


def ipw_survival(dataset: Dataset, arm: int, tau: int) -> SurvivalCurve:
    """Unadjusted IPW curve with product-limit censoring weights.

    May be non-monotone; see :attr:`SurvivalCurve.monotone`.
    """
    check_tau(dataset, tau)
    n = dataset.n
    g_a = np.mean(dataset.a == arm)
    if g_a == 0:
        raise ValueError(f"arm {arm} has no subjects")
    g_curve = km_censoring(dataset, arm, tau).values[:tau]
    if np.any(g_curve <= 0):
        t_bad = int(np.argmax(g_curve <= 0))
        raise DegenerateWeightsError(
            f"censoring survival estimate is 0 at t={t_bad} in arm {arm}")
    obs = _observed_through(dataset, tau)[dataset.a == arm].sum(axis=0)
    values = obs / (n * g_a * g_curve)
    return SurvivalCurve(arm, values, "IPW")


def theta_ipw_unadjusted(dataset: Dataset, tau: int) -> float:
    return (rmst_from_curve(ipw_survival(dataset, 1, tau))
            - rmst_from_curve(ipw_survival(dataset, 0, tau)))


def adjusted_ipw_survival(dataset: Dataset, arm: int, tau: int, g_a_prob: np.ndarray,
                          g_r_hazard: np.ndarray) -> SurvivalCurve:
    """Covariate-adjusted IPW curve.

    Parameters
    ----------
    g_a_prob : ndarray, shape (n,)
        ``g_A(arm, W_i)``.
    g_r_hazard : ndarray, shape (n, tau)
        ``g_R(m, arm, W_i)`` for ``m = 0..tau-1``.
    """
    g_curve = censoring_from_hazard(g_r_hazard[:, :tau - 1])  # (n, tau)
    den = g_a_prob[:, None] * g_curve
    sel = dataset.a == arm
    obs = _observed_through(dataset, tau)
    need = den[sel][obs[sel] > 0]
    if need.size and need.min() < POSITIVITY_FLOOR:
        warnings.warn(f"arm {arm}: inverse-weight denominator {need.min():.3g} "
                      f"below {POSITIVITY_FLOOR:g}", PositivityWarning, stacklevel=2)
    contrib = np.zeros_like(obs)
    contrib[sel] = obs[sel] / den[sel]
    return SurvivalCurve(arm, contrib.mean(axis=0), "adj-IPW")


def fitted_treatment_and_censoring(dataset: Dataset, g_a_fit: LogisticFit,
                                   g_r_fit: LogisticFit, tau: int):
    """Grids ``g_A(a, W_i)`` (n, 2) and ``g_R(m, a, W_i)`` (n, 2, tau)."""
    p1 = expit(predict_logit_grid(g_a_fit, dataset.w, [0])[:, 0, 0])
    g_a = np.column_stack([1.0 - p1, p1])
    g_r = expit(predict_logit_grid(g_r_fit, dataset.w, np.arange(tau)))
    return g_a, g_r


def theta_ipw_adjusted(dataset: Dataset, g_a_fit: LogisticFit, g_r_fit: LogisticFit,
                       tau: int) -> float:
    check_tau(dataset, tau)
    g_a, g_r = fitted_treatment_and_censoring(dataset, g_a_fit, g_r_fit, tau)
    s1 = adjusted_ipw_survival(dataset, 1, tau, g_a[:, 1], g_r[:, 1, :])
    s0 = adjusted_ipw_survival(dataset, 0, tau, g_a[:, 0], g_r[:, 0, :])
    return rmst_from_curve(s1) - rmst_from_curve(s0)
