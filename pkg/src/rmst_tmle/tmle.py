"""Targeted maximum likelihood estimation of the RMST difference.

Each outer iteration fluctuates the event hazard along ``(Z_1, Z_0)``, then
the censoring hazard along ``H`` and finally the treatment mechanism along
``M``, recomputing survival and censoring curves between the three steps.
Nuisances are held as logits on the ``subject x arm x time`` grid; cells
that the working model fixes at probability 0 carry ``-inf``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import expit

from .core_data import Dataset
from .curves import SurvivalCurve, check_tau
from . import _kernels as _k
from .eif import (NuisanceBundle, censoring_indicators, eval_eif, event_indicators, h_grid,
                  m_vector, z_grid)
from .glm import (PROB_HI, PROB_LO, GlmError, LogisticFit, ModelSpec, SpecError, build_design,
                  fit_logistic, fit_offset_1d, logit, parse_spec, predict_logit_grid)

__all__ = [
    "TmleConfig",
    "InitialFit",
    "TmleResult",
    "fit_initial",
    "target_hazard",
    "target_censoring",
    "target_treatment",
    "tmle_fit",
]

DEFAULT_H_SPEC = "1 + t + a + a:t + W"
DEFAULT_GR_SPEC = "saturated(t,a) + W"
DEFAULT_GA_SPEC = "1 + W"


@dataclass(frozen=True)
class TmleConfig:
    """Working models and stopping rule for :func:`tmle_fit`.

    ``allow_unsaturated_censoring`` must be set to use a censoring model
    without ``saturated(t,a)`` terms.  ``stop_scale`` selects whether the
    stopping rule compares successive predictions as logits (default) or as
    probabilities.
    """

    tau: int
    h_spec: str = DEFAULT_H_SPEC
    g_r_spec: str = DEFAULT_GR_SPEC
    g_a_spec: str = DEFAULT_GA_SPEC
    max_iter: int = 50
    tol_scale: float = 1e-6
    prob_lo: float = PROB_LO
    prob_hi: float = PROB_HI
    allow_unsaturated_censoring: bool = False
    stop_scale: str = "logit"

    def __post_init__(self):
        if self.tau < 2:
            raise ValueError(f"tau must be >= 2, got {self.tau}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0.0 <= self.prob_lo < 0.5 < self.prob_hi <= 1.0:
            raise ValueError("clamp bounds must satisfy 0 <= lo < 0.5 < hi <= 1")
        if self.stop_scale not in ("logit", "prob"):
            raise ValueError("stop_scale must be 'logit' or 'prob'")

    def specs(self, covariate_names, p: int) -> tuple[ModelSpec, ModelSpec, ModelSpec]:
        h = parse_spec(self.h_spec, "h", covariate_names, p)
        g_r = parse_spec(self.g_r_spec, "g_R", covariate_names, p)
        g_a = parse_spec(self.g_a_spec, "g_A", covariate_names, p)
        kinds = {t.kind for t in g_r.terms}
        saturated = {"intercept", "time_factor", "arm", "arm:time_factor"} <= kinds
        if not saturated and not self.allow_unsaturated_censoring:
            raise SpecError("censoring model lacks saturated(t,a) terms; set "
                           "allow_unsaturated_censoring to proceed")
        return h, g_r, g_a


@dataclass(frozen=True, eq=False)
class InitialFit:
    """Initial working-model fits and their logits on the prediction grid."""

    h_fit: LogisticFit
    g_r_fit: LogisticFit
    g_a_fit: LogisticFit
    h_logit: np.ndarray  # (n, 2, tau)
    g_r_logit: np.ndarray  # (n, 2, tau)
    g_a_logit: np.ndarray  # (n,)

    @property
    def ridge_used(self) -> bool:
        return self.h_fit.ridge_used or self.g_r_fit.ridge_used or self.g_a_fit.ridge_used

    def bundle(self) -> NuisanceBundle:
        return NuisanceBundle(expit(self.h_logit), expit(self.g_r_logit), expit(self.g_a_logit))


@dataclass(eq=False)
class TmleResult:
    theta_hat: float
    rmst_by_arm: tuple[float, float]  # (arm 0, arm 1)
    survival_curves: tuple[SurvivalCurve, SurvivalCurve]
    iterations_used: int
    converged: bool
    mean_eif: float
    se_plugin: float
    epsilon_history: list[tuple[float, float]] = field(default_factory=list)
    gamma_history: list[float] = field(default_factory=list)
    nu_history: list[float] = field(default_factory=list)
    ridge_used: bool = False
    eif: np.ndarray | None = None
    bundle: NuisanceBundle | None = None
    initial: InitialFit | None = None
    config: TmleConfig | None = None

    def to_dict(self) -> dict:
        """JSON-ready summary (curves listed from ``t = 0``)."""
        return {
            "theta": self.theta_hat,
            "rmst": {"arm0": self.rmst_by_arm[0], "arm1": self.rmst_by_arm[1]},
            "se_plugin": self.se_plugin,
            "se_caveat": "ridge fallback used in a working-model fit" if self.ridge_used else None,
            "curves": {"S_arm0": self.survival_curves[0].values.tolist(),
                       "S_arm1": self.survival_curves[1].values.tolist()},
            "diagnostics": {
                "converged": self.converged,
                "iterations": self.iterations_used,
                "mean_eif": self.mean_eif,
                "epsilon": [list(e) for e in self.epsilon_history],
                "gamma": list(self.gamma_history),
                "nu": list(self.nu_history),
                "ridge_used": self.ridge_used,
            },
            "config": asdict(self.config) if self.config is not None else None,
        }


class _Rows:
    """Flat index sets for the event-hazard and censoring-hazard fit rows."""

    def __init__(self, dataset: Dataset, tau: int):
        at_risk, event = event_indicators(dataset, tau)
        self.h_i, self.h_m = np.nonzero(at_risk)
        self.h_y = event[self.h_i, self.h_m].astype(float)
        self.h_a = dataset.a[self.h_i].astype(np.int64)
        j, r = censoring_indicators(dataset, tau)
        j[:, tau - 1:] = False
        self.g_i, self.g_m = np.nonzero(j)
        self.g_y = r[self.g_i, self.g_m].astype(float)
        self.g_a = dataset.a[self.g_i].astype(np.int64)


def _clip_logit(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    lo_l = -np.inf if lo <= 0 else logit(lo)
    hi_l = np.inf if hi >= 1 else logit(hi)
    return np.where(np.isneginf(x), x, np.clip(x, lo_l, hi_l))


def fit_initial(dataset: Dataset, config: TmleConfig) -> InitialFit:
    """Step 1: working-model fits for ``h``, ``g_R`` and ``g_A``.

    The event hazard is fit on rows with ``I_m = 1`` and ``1 <= m <= tau-1``,
    the censoring hazard on rows with ``J_m = 1`` and ``m <= tau-2``.
    """
    tau = config.tau
    check_tau(dataset, tau)
    h_spec, g_r_spec, g_a_spec = config.specs(dataset.covariate_names, dataset.p)
    k = dataset.k_max
    rows = _Rows(dataset, tau)
    lo, hi = config.prob_lo, config.prob_hi
    w = dataset.w

    d_h = build_design(h_spec, rows.h_m, rows.h_a, w[rows.h_i], k)
    h_fit = fit_logistic(d_h, rows.h_y)
    if len(rows.g_i):
        d_g = build_design(g_r_spec, rows.g_m, rows.g_a, w[rows.g_i], k)
        g_r_fit = fit_logistic(d_g, rows.g_y)
    else:
        raise GlmError("no subjects at censoring risk before tau-1")
    d_a = build_design(g_a_spec, 0, dataset.a, w, k)
    g_a_fit = fit_logistic(d_a, dataset.a)

    times = np.arange(tau)
    h_logit = predict_logit_grid(h_fit, w, times, lo, hi)
    h_logit[:, :, 0] = -np.inf
    g_r_logit = predict_logit_grid(g_r_fit, w, times, lo, hi)
    g_a_logit = predict_logit_grid(g_a_fit, w, [0], lo, hi)[:, 0, 0]
    return InitialFit(h_fit, g_r_fit, g_a_fit, h_logit, g_r_logit, g_a_logit)


@lru_cache(maxsize=4)
def _fluctuation_spec(n_cov: int) -> ModelSpec:
    # no intercept: the offset carries the current fit
    return parse_spec(" + ".join(f"c(z{j})" for j in range(n_cov)), "h")


def _fluctuate(x: np.ndarray, y: np.ndarray, offset: np.ndarray, k: int) -> LogisticFit:
    spec = _fluctuation_spec(x.shape[1])
    design = build_design(spec, 0, np.zeros(len(y), dtype=np.int64), np.zeros((len(y), 0)), k,
                          extra={f"z{j}": x[:, j] for j in range(x.shape[1])})
    return fit_logistic(design, y, offset)


def _coef(fit: LogisticFit) -> np.ndarray:
    return np.nan_to_num(fit.coefficients, nan=0.0)


def target_hazard(bundle: NuisanceBundle, h_logit: np.ndarray, dataset: Dataset,
                  rows: _Rows | None = None, lo: float = PROB_LO, hi: float = PROB_HI):
    """Step 2a: fit ``(eps_1, eps_0)`` and return the updated hazard logits."""
    tau = bundle.tau
    rows = rows or _Rows(dataset, tau)
    z = z_grid(bundle)
    zr = z[rows.h_i, rows.h_a, rows.h_m]
    x = np.column_stack([np.where(rows.h_a == 1, zr, 0.0), np.where(rows.h_a == 0, zr, 0.0)])
    off = h_logit[rows.h_i, rows.h_a, rows.h_m]
    fit = _fluctuate(x, rows.h_y, off, tau)
    eps1, eps0 = _coef(fit)
    new = h_logit.copy()
    new[:, 1, 1:] += eps1 * z[:, 1, 1:]
    new[:, 0, 1:] += eps0 * z[:, 0, 1:]
    return _clip_logit(new, lo, hi), (float(eps1), float(eps0)), fit


def target_censoring(bundle: NuisanceBundle, g_r_logit: np.ndarray, dataset: Dataset,
                     rows: _Rows | None = None, lo: float = PROB_LO, hi: float = PROB_HI):
    """Step 2b: fit ``gamma`` along ``H`` on rows ``m <= tau-2``."""
    tau = bundle.tau
    rows = rows or _Rows(dataset, tau)
    hc = h_grid(bundle)
    x = hc[rows.g_i, rows.g_a, rows.g_m][:, None]
    off = g_r_logit[rows.g_i, rows.g_a, rows.g_m]
    fit = _fluctuate(x, rows.g_y, off, tau)
    gamma = float(_coef(fit)[0])
    new = g_r_logit.copy()
    new[:, :, : tau - 1] += gamma * hc[:, :, : tau - 1]
    return _clip_logit(new, lo, hi), gamma, fit


def target_treatment(bundle: NuisanceBundle, g_a_logit: np.ndarray, dataset: Dataset,
                     lo: float = PROB_LO, hi: float = PROB_HI):
    """Step 2c: fit ``nu`` along ``M`` over all subjects."""
    mv = m_vector(bundle)
    fit = _fluctuate(mv[:, None], dataset.a.astype(float), g_a_logit, bundle.tau)
    nu = float(_coef(fit)[0])
    return _clip_logit(g_a_logit + nu * mv, lo, hi), nu, fit


def _msd(p_new: np.ndarray, p_old: np.ndarray) -> float:
    return float(np.mean((p_new - p_old) ** 2)) if p_new.size else 0.0


def tmle_fit(dataset: Dataset, config: TmleConfig, initial: InitialFit | None = None
             ) -> TmleResult:
    """Run the targeting loop and return the substitution estimate.

    Iteration stops once the mean squared change in predictions of every
    working model, over its own fit rows, is at most ``tol_scale / n``.
    The loop works on logit grids with compiled kernels; each sub-step
    matches :func:`target_hazard`, :func:`target_censoring` and
    :func:`target_treatment`.
    """
    tau, n = config.tau, dataset.n
    lo_l = -np.inf if config.prob_lo <= 0 else float(logit(config.prob_lo))
    hi_l = np.inf if config.prob_hi >= 1 else float(logit(config.prob_hi))
    init = initial or fit_initial(dataset, config)
    rows = _Rows(dataset, tau)
    h_flat = (rows.h_i * 2 + rows.h_a) * tau + rows.h_m
    g_flat = (rows.g_i * 2 + rows.g_a) * tau + rows.g_m
    h_arm = [rows.h_a == a for a in (0, 1)]
    a_obs = dataset.a.astype(float)
    h_l = np.ascontiguousarray(init.h_logit)
    g_l = np.ascontiguousarray(init.g_r_logit)
    a_l = np.ascontiguousarray(init.g_a_logit)
    tol = config.tol_scale / n
    eps_hist, gam_hist, nu_hist = [], [], []
    ridge = init.ridge_used
    converged = False
    it = 0

    scale = (lambda x: x) if config.stop_scale == "logit" else expit

    for it in range(1, config.max_iter + 1):
        # 2a: event hazard along Z, one coefficient per arm
        ga1 = expit(a_l)
        z = _k.clever_z(h_l, g_l, ga1)
        zr, off = z.ravel()[h_flat], h_l.ravel()[h_flat]
        eps = np.zeros(2)
        for a in (0, 1):
            f = fit_offset_1d(zr[h_arm[a]], rows.h_y[h_arm[a]], off[h_arm[a]])
            eps[a] = f.coef
            ridge = ridge or f.ridge_used
        h_new = _k.shift_logit(h_l, z, eps, lo_l, hi_l)
        # 2b: censoring hazard along H, with S from the updated h
        hc = _k.clever_h(h_new, g_l, ga1)
        f = fit_offset_1d(hc.ravel()[g_flat], rows.g_y, g_l.ravel()[g_flat])
        gamma = f.coef
        ridge = ridge or f.ridge_used
        g_new = _k.shift_logit(g_l, hc, np.array([gamma, gamma]), lo_l, hi_l)
        # 2c: treatment along M
        mv = _k.clever_m(h_new, ga1)
        f = fit_offset_1d(mv, a_obs, a_l)
        nu = f.coef
        ridge = ridge or f.ridge_used
        a_new = np.clip(a_l + nu * mv, lo_l, hi_l)

        eps_hist.append((float(eps[1]), float(eps[0])))
        gam_hist.append(gamma)
        nu_hist.append(nu)
        changes = (_msd(scale(h_new.ravel()[h_flat]), scale(off)),
                   _msd(scale(g_new.ravel()[g_flat]), scale(g_l.ravel()[g_flat])),
                   _msd(scale(a_new), scale(a_l)))
        h_l, g_l, a_l = h_new, g_new, a_new
        if max(changes) <= tol:
            converged = True
            break

    bundle = NuisanceBundle(expit(h_l), expit(g_l), expit(a_l))
    marg = bundle.survival.mean(axis=0)  # (2, tau)
    rmst = (float(marg[0].sum()), float(marg[1].sum()))
    theta = rmst[1] - rmst[0]
    eif = eval_eif(dataset, bundle, theta)
    values = eif.values
    se = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    curves = (SurvivalCurve(0, marg[0], "substitution"), SurvivalCurve(1, marg[1], "substitution"))
    return TmleResult(
        theta_hat=theta, rmst_by_arm=rmst, survival_curves=curves, iterations_used=it,
        converged=converged, mean_eif=float(np.mean(values)), se_plugin=se,
        epsilon_history=eps_hist, gamma_history=gam_hist, nu_history=nu_hist,
        ridge_used=ridge, eif=values, bundle=bundle, initial=init, config=config)
