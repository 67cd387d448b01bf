"""Efficient influence function pieces, D_km, D_car and the AIPW estimator.

All nuisance surfaces are stored on the grid ``subject x arm x time``: the
value at ``[i, a, m]`` is the surface evaluated at ``(m, a, W_i)``.  Survival
ratios ``S(t)/S(m)`` are never formed as quotients; the sums that need them
come from the backward recursion ``U(m) = 1 + (1 - h(m+1)) U(m+1)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from ._kernels import tail_sums
from .core_data import Dataset
from .curves import POSITIVITY_FLOOR, PositivityWarning, censoring_from_hazard, survival_from_hazard

__all__ = [
    "NuisanceBundle",
    "EifValue",
    "AipwResult",
    "marginal_bundle",
    "z_grid",
    "h_grid",
    "m_vector",
    "aux_Z",
    "aux_H",
    "aux_M",
    "eval_eif",
    "eval_D_km",
    "eval_D_car",
    "theta_aipw",
    "event_indicators",
    "censoring_indicators",
]


@dataclass(frozen=True, eq=False)
class NuisanceBundle:
    """Hazard and treatment surfaces for the subjects of one sample.

    Parameters
    ----------
    h : ndarray, shape (n, 2, tau)
        Event hazard ``h(m, a, W_i)``; the ``m = 0`` slot is ignored.
    g_r : ndarray, shape (n, 2, tau)
        Censoring hazard ``g_R(m, a, W_i)``; slots ``m <= tau-2`` are used.
    g_a1 : ndarray, shape (n,)
        ``P(A = 1 | W_i)``.
    """

    h: np.ndarray
    g_r: np.ndarray
    g_a1: np.ndarray

    def __post_init__(self):
        if self.h.ndim != 3 or self.h.shape[1] != 2:
            raise ValueError("h must have shape (n, 2, tau)")
        if self.g_r.shape != self.h.shape or self.g_a1.shape != self.h.shape[:1]:
            raise ValueError("nuisance grids disagree in shape")
        if self.tau < 2:
            raise ValueError("tau must be >= 2")

    @property
    def tau(self) -> int:
        return self.h.shape[2]

    @property
    def n(self) -> int:
        return self.h.shape[0]

    @cached_property
    def survival(self) -> np.ndarray:
        """``S(t, a, W_i)`` for ``t = 0..tau-1``."""
        return survival_from_hazard(self.h)

    @cached_property
    def censoring(self) -> np.ndarray:
        """``G(t, a, W_i)`` for ``t = 0..tau-1``."""
        return censoring_from_hazard(self.g_r[:, :, : self.tau - 1])

    @property
    def g_a(self) -> np.ndarray:
        """``g_A(a, W_i)`` with shape (n, 2)."""
        return np.column_stack([1.0 - self.g_a1, self.g_a1])

    @cached_property
    def tail_sum(self) -> np.ndarray:
        """``U(m) = sum_{t=m..tau-1} S(t)/S(m)`` on the grid."""
        return tail_sums(np.ascontiguousarray(self.h, dtype=float))


@dataclass(frozen=True, eq=False)
class EifValue:
    """Per-subject ``D(O_i) = martingale_i + plugin_i - theta``."""

    martingale: np.ndarray
    plugin: np.ndarray
    theta: float

    @property
    def values(self) -> np.ndarray:
        return self.martingale + self.plugin - self.theta

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))


@dataclass(frozen=True)
class AipwResult:
    theta: float
    rmst: tuple[float, float]  # (arm 0, arm 1)


def event_indicators(dataset: Dataset, tau: int) -> tuple[np.ndarray, np.ndarray]:
    """``I_m`` and ``L_m`` per subject for ``m = 0..tau-1`` (slot 0 is zero)."""
    m = np.arange(tau)
    tt, d = dataset.t_tilde[:, None], dataset.delta[:, None]
    at_risk = (tt >= m) & (m >= 1)
    event = (tt == m) & (d == 1) & (m >= 1)
    return at_risk, event


def censoring_indicators(dataset: Dataset, tau: int) -> tuple[np.ndarray, np.ndarray]:
    """``J_m`` and ``R_m`` per subject for ``m = 0..tau-1``."""
    m = np.arange(tau)
    tt, d = dataset.t_tilde[:, None], dataset.delta[:, None]
    cens = (tt == m) & (d == 0)
    return (tt > m) | cens, cens


def z_grid(bundle: NuisanceBundle) -> np.ndarray:
    """``Z_a(m, a, W_i)`` without the arm indicator; zero at ``m = 0``."""
    z = -bundle.tail_sum / (bundle.g_a[:, :, None] * bundle.censoring)
    z[:, :, 0] = 0.0
    return z


def h_grid(bundle: NuisanceBundle) -> np.ndarray:
    """``H(m, a, W_i)`` for ``m = 0..tau-2``; the last slot is zero."""
    tau = bundle.tau
    sign = np.array([1.0, -1.0])  # -(2a - 1)
    out = np.zeros_like(bundle.h)
    out[:, :, : tau - 1] = (sign[None, :, None] / bundle.g_a[:, :, None]
                            * (bundle.tail_sum[:, :, : tau - 1] - 1.0)
                            / bundle.censoring[:, :, 1:])
    return out


def m_vector(bundle: NuisanceBundle) -> np.ndarray:
    """``M(W_i)`` for each subject."""
    tot = bundle.survival[:, :, 1:].sum(axis=2)
    return (tot / bundle.g_a).sum(axis=1)


def aux_Z(bundle: NuisanceBundle, i: int, m: int, a_target: int, a_obs: int) -> float:
    """``Z_{a_target}(m, a_obs, W_i)`` for ``1 <= m <= tau-1``."""
    if not 1 <= m <= bundle.tau - 1:
        raise ValueError(f"m must be in 1..{bundle.tau - 1}")
    if a_obs != a_target:
        return 0.0
    return float(z_grid_point(bundle, i, m, a_target))


def z_grid_point(bundle: NuisanceBundle, i: int, m: int, a: int) -> float:
    return -bundle.tail_sum[i, a, m] / (bundle.g_a[i, a] * bundle.censoring[i, a, m])


def aux_H(bundle: NuisanceBundle, i: int, m: int, a_obs: int) -> float:
    if not 0 <= m <= bundle.tau - 2:
        raise ValueError(f"m must be in 0..{bundle.tau - 2}")
    sign = -(2 * a_obs - 1)
    return float(sign / bundle.g_a[i, a_obs] * (bundle.tail_sum[i, a_obs, m] - 1.0)
                 / bundle.censoring[i, a_obs, m + 1])


def aux_M(bundle: NuisanceBundle, i: int) -> float:
    s = bundle.survival[i, :, 1:].sum(axis=1)
    return float(s[1] / bundle.g_a1[i] + s[0] / (1.0 - bundle.g_a1[i]))


def _observed(dataset: Dataset, bundle: NuisanceBundle):
    if dataset.n != bundle.n:
        raise ValueError("dataset and bundle describe different samples")
    rows = np.arange(dataset.n)
    return rows, dataset.a.astype(np.int64)


def _arm_martingales(dataset: Dataset, bundle: NuisanceBundle) -> np.ndarray:
    """``sum_m I_m Z_A(m) (L_m - h(m, A))`` per subject (no sign), shape (n,)."""
    rows, a = _observed(dataset, bundle)
    at_risk, event = event_indicators(dataset, bundle.tau)
    z = z_grid(bundle)[rows, a]
    resid = event - bundle.h[rows, a]
    return np.where(at_risk, z * resid, 0.0).sum(axis=1)


def _check_positivity(dataset: Dataset, bundle: NuisanceBundle) -> None:
    rows, a = _observed(dataset, bundle)
    at_risk, _ = event_indicators(dataset, bundle.tau)
    den = bundle.g_a[rows, a][:, None] * bundle.censoring[rows, a]
    used = den[at_risk]
    if used.size and used.min() < POSITIVITY_FLOOR:
        warnings.warn(f"inverse-weight denominator {used.min():.3g} below "
                      f"{POSITIVITY_FLOOR:g}", PositivityWarning, stacklevel=3)


def eval_eif(dataset: Dataset, bundle: NuisanceBundle, theta: float) -> EifValue:
    """Efficient influence function of the RMST difference at every subject."""
    part = _arm_martingales(dataset, bundle)
    sign = 2.0 * dataset.a - 1.0
    s = bundle.survival[:, :, 1:].sum(axis=2)
    return EifValue(sign * part, s[:, 1] - s[:, 0], float(theta))


def theta_aipw(dataset: Dataset, bundle: NuisanceBundle) -> AipwResult:
    """Closed-form root of the AIPW estimating equation, with per-arm RMST."""
    _check_positivity(dataset, bundle)
    part = _arm_martingales(dataset, bundle)
    s = bundle.survival.sum(axis=2)  # includes S(0) = 1
    rmst = tuple(float(np.mean(s[:, a] + np.where(dataset.a == a, part, 0.0))) for a in (0, 1))
    return AipwResult(rmst[1] - rmst[0], rmst)


def eval_D_km(dataset: Dataset, bundle: NuisanceBundle) -> np.ndarray:
    """Influence function of the Kaplan-Meier contrast, by its double sum.

    The bundle must be free of covariates (every subject row identical);
    :func:`marginal_bundle` builds one.
    """
    tau = bundle.tau
    for arr in (bundle.h, bundle.g_r):
        if not np.allclose(arr, arr[:1], rtol=0, atol=0):
            raise ValueError("D_km needs a covariate-free bundle")
    at_risk, event = event_indicators(dataset, tau)
    out = np.zeros(dataset.n)
    for a in (0, 1):
        sel = dataset.a == a
        if not sel.any():
            continue
        h = bundle.h[0, a]
        g = bundle.g_a[0, a] * bundle.censoring[0, a]
        # ratio[m, t] = S(t)/S(m) = prod_{m < u <= t} (1 - h(u)) for m <= t
        ratio = np.zeros((tau, tau))
        for m in range(1, tau):
            ratio[m, m:] = np.cumprod(np.concatenate(([1.0], 1.0 - h[m + 1:])))
        coef = at_risk[sel] * (event[sel] - h[None, :]) / g[None, :]
        coef[:, 0] = 0.0
        inner = coef @ ratio  # column t: sum_{m <= t} coef_m S(t)/S(m)
        out[sel] = -(2 * a - 1) * inner[:, 1:].sum(axis=1)
    return out


def eval_D_car(dataset: Dataset, bundle: NuisanceBundle) -> np.ndarray:
    """``M(W)(A - g_A(1|W)) + sum_{m <= tau-2} J_m H(m, A, W)(R_m - g_R(m, A, W))``."""
    rows, a = _observed(dataset, bundle)
    tau = bundle.tau
    j, r = censoring_indicators(dataset, tau)
    hcov = h_grid(bundle)[rows, a]
    resid = r - bundle.g_r[rows, a]
    keep = j.copy()
    keep[:, tau - 1:] = False
    cens_part = np.where(keep, hcov * resid, 0.0).sum(axis=1)
    return m_vector(bundle) * (dataset.a - bundle.g_a1) + cens_part


def marginal_bundle(dataset: Dataset, tau: int) -> NuisanceBundle:
    """Covariate-free bundle from product-limit hazards and arm proportions."""
    from .curves import risk_table

    h = np.zeros((2, tau))
    g = np.zeros((2, tau))
    for a in (0, 1):
        tab = risk_table(dataset, a)
        with np.errstate(invalid="ignore", divide="ignore"):
            ha = np.where(tab["at_risk"] > 0, tab["events"] / np.maximum(tab["at_risk"], 1), 0.0)
            ga = np.where(tab["censor_risk"] > 0,
                          tab["censored"] / np.maximum(tab["censor_risk"], 1), 0.0)
        h[a] = ha[:tau]
        h[a, 0] = 0.0
        g[a] = ga[:tau]
    n = dataset.n
    p1 = float(np.mean(dataset.a))
    return NuisanceBundle(np.broadcast_to(h, (n, 2, tau)).copy(),
                          np.broadcast_to(g, (n, 2, tau)).copy(), np.full(n, p1))
