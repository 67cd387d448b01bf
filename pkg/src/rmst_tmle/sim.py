"""Synthetic two-arm trials with discrete-time survival and drop-out.

Control event times follow a logistic discrete hazard in five standard
normal covariates.  Treated subjects get a rounded chi-square delay.
Censoring follows one of two logistic drop-out hazards.  Every replicate
draws from its own Philox stream keyed by ``(master seed, cell, replicate)``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import optimize, stats
from scipy.special import expit

from .core_data import Dataset
from .streams import make_rng

__all__ = [
    "SCENARIOS",
    "CENSORING",
    "DEFAULT_BETA",
    "SIM_H_SPEC",
    "SIM_GR_SPEC",
    "SIM_GA_SPEC",
    "DgpConfig",
    "make_rng",
    "gen_trial",
    "control_survival",
    "exact_theta",
    "oracle_theta",
    "mortality",
    "calibrate_alpha0",
    "calibrate_mu",
    "calibrate",
    "load_fixtures",
    "dropout_fraction",
    "CellResult",
    "SimReport",
    "run_study",
]

SCENARIOS = ("A", "B", "C")
CENSORING = ("non_informative", "informative", "none")
DEFAULT_BETA = tuple(math.log(x) for x in (1.5, 0.9, 1.7, 1.0, 1.1))

SIM_H_SPEC = "1 + t + a + a:t + W"
SIM_GR_SPEC = "saturated(t,a) + w1 + w5 + a:w3"
SIM_GA_SPEC = "1 + W"

_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(80)
_GH_WEIGHTS = _GH_WEIGHTS / _GH_WEIGHTS.sum()


@lru_cache(maxsize=1)
def load_fixtures() -> dict:
    """Calibrated constants shipped with the package."""
    text = resources.files("rmst_tmle").joinpath("fixtures.json").read_text()
    return json.loads(text)


def _default_alpha0() -> float:
    return float(load_fixtures()["alpha0"])


@dataclass(frozen=True)
class DgpConfig:
    """One cell of the simulation design.

    ``mu = 0`` gives no treatment effect; ``mu > 0`` delays treated event
    times by ``rint(chi2(mu))`` days.  ``alpha0 = None`` takes the calibrated
    intercept from the fixtures file.
    """

    n: int = 500
    k: int = 180
    tau: int = 180
    scenario: str = "A"
    censoring: str = "non_informative"
    mu: float = 0.0
    beta: tuple[float, ...] = DEFAULT_BETA
    alpha0: float | None = None
    alpha1: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if self.censoring not in CENSORING:
            raise ValueError(f"censoring must be one of {CENSORING}")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")
        if not 1 <= self.tau <= self.k:
            raise ValueError("need 1 <= tau <= k")
        if len(self.beta) != 5:
            raise ValueError("beta must have length 5")
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))

    @property
    def intercept(self) -> float:
        return _default_alpha0() if self.alpha0 is None else float(self.alpha0)

    @property
    def effect(self) -> str:
        return "zero" if self.mu == 0 else f"positive({self.mu:g})"


def _first_crossing(log_u: np.ndarray, log_surv: np.ndarray, none_value: int) -> np.ndarray:
    # first column index j with log_u >= log_surv[:, j]; none_value if never
    hit = log_u[:, None] >= log_surv
    first = hit.argmax(axis=1)
    return np.where(hit.any(axis=1), first, none_value)


def gen_trial(config: DgpConfig, rng: np.random.Generator | None = None) -> Dataset:
    """Draw one trial of ``config.n`` subjects."""
    rng = make_rng(config.seed) if rng is None else rng
    n, k = config.n, config.k
    w = rng.standard_normal((n, 5))
    lp = w @ np.asarray(config.beta)
    t_grid = np.arange(1, k + 1)
    haz = expit(config.intercept + config.alpha1 * t_grid[None, :] + lp[:, None])
    log_s = np.cumsum(np.log1p(-haz), axis=1)  # log S(t), t = 1..k
    u_t = rng.random(n)
    big = np.iinfo(np.int64).max // 4  # stands in for "no event by k"
    t_event = _first_crossing(np.log(u_t), log_s, -1)
    t_event = np.where(t_event >= 0, t_event + 1, big)

    if config.scenario != "A":
        fresh = rng.standard_normal((n, 5))
        swap = rng.random(n) < 0.5 if config.scenario == "B" else np.ones(n, dtype=bool)
        w = np.where(swap[:, None], fresh, w)

    a = (rng.random(n) < 0.5).astype(np.int64)
    if config.mu > 0:
        shift = np.rint(rng.chisquare(config.mu, n)).astype(np.int64)
        t_event = np.where((a == 1) & (t_event < big), t_event + shift, t_event)
    t_event = np.where(t_event > k, big, t_event)

    if config.censoring == "none":
        c = np.full(n, k)
    else:
        m_grid = np.arange(k)  # censoring hazard at m = 0..k-1
        if config.censoring == "non_informative":
            eta = -5.5 + 0.007 * m_grid[None, :] + np.zeros((n, 1))
        else:
            eta = (-6.5 + 0.007 * m_grid[None, :]
                   + (0.6 * w[:, 2] * a + 0.3 * (w[:, 0] + w[:, 4]))[:, None])
        log_g_next = np.cumsum(np.log1p(-expit(eta)), axis=1)  # log G(m+1)
        u_c = rng.random(n)
        c = _first_crossing(np.log(u_c), log_g_next, k)

    delta = (t_event <= c).astype(np.int64)
    t_tilde = np.minimum(t_event, c).astype(np.int64)
    return Dataset(ids=tuple(str(i) for i in range(n)), w=w, a=a, delta=delta,
                   t_tilde=t_tilde, k_max=k,
                   covariate_names=tuple(f"w{j}" for j in range(1, 6)))


def dropout_fraction(dataset: Dataset) -> float:
    """Share of subjects censored before the end of follow-up."""
    return float(np.mean((dataset.delta == 0) & (dataset.t_tilde < dataset.k_max)))


def _lp_scale(beta) -> float:
    return float(np.sqrt(np.sum(np.square(beta))))


def control_survival(alpha0: float, alpha1: float, beta, k: int) -> np.ndarray:
    """Exact ``P(T_0 > t)`` for ``t = 0..k`` by Gauss-Hermite quadrature.

    The linear predictor ``beta'W`` is normal with variance ``|beta|^2``;
    covariate replacement in scenarios B and C leaves this marginal intact.
    """
    lp = _lp_scale(beta) * _GH_NODES
    t = np.arange(1, k + 1)
    haz = expit(alpha0 + alpha1 * t[None, :] + lp[:, None])
    s = np.exp(np.cumsum(np.log1p(-haz), axis=1))
    return np.concatenate(([1.0], _GH_WEIGHTS @ s))


def _shift_pmf(mu: float, size: int) -> np.ndarray:
    if mu == 0:
        pmf = np.zeros(size)
        pmf[0] = 1.0
        return pmf
    edges = np.concatenate(([0.0], np.arange(size) + 0.5))
    return np.diff(stats.chi2.cdf(edges, mu))


def exact_theta(config: DgpConfig) -> float:
    """RMST difference implied by the data-generating process."""
    k, tau = config.k, config.tau
    s0 = control_survival(config.intercept, config.alpha1, config.beta, k)
    if config.mu == 0:
        return 0.0
    pmf = _shift_pmf(config.mu, tau)
    # P(T_0 + D > t) = sum_d pmf(d) P(T_0 > t - d), with P(T_0 > s) = 1 for s <= 0
    s1 = np.empty(tau)
    for t in range(tau):
        d = np.arange(tau)
        s_shift = np.where(t - d <= 0, 1.0, s0[np.clip(t - d, 0, k)])
        s1[t] = pmf @ s_shift + (1.0 - pmf.sum())
    return float(s1.sum() - s0[:tau].sum())


def oracle_theta(config: DgpConfig, n_mc: int = 200_000, seed: int = 0) -> float:
    """Monte Carlo RMST difference from paired potential outcomes."""
    rng = make_rng(seed, 10**6)
    k, tau = config.k, config.tau
    w = rng.standard_normal((n_mc, 5))
    lp = w @ np.asarray(config.beta)
    haz = expit(config.intercept + config.alpha1 * np.arange(1, k + 1)[None, :] + lp[:, None])
    # one subject at a time would be slow; chunk the cumulative products
    t0 = np.empty(n_mc)
    u = rng.random(n_mc)
    for lo in range(0, n_mc, 20_000):
        sl = slice(lo, lo + 20_000)
        log_s = np.cumsum(np.log1p(-haz[sl]), axis=1)
        first = _first_crossing(np.log(u[sl]), log_s, -1)
        t0[sl] = np.where(first >= 0, first + 1, np.inf)
    shift = np.rint(rng.chisquare(config.mu, n_mc)) if config.mu > 0 else np.zeros(n_mc)
    t1 = t0 + shift
    return float(np.mean(np.minimum(t1, tau) - np.minimum(t0, tau)))


def mortality(alpha0: float, alpha1: float = 0.0, beta=DEFAULT_BETA, k: int = 180) -> float:
    """Control-arm ``P(T <= k)``."""
    return float(1.0 - control_survival(alpha0, alpha1, beta, k)[-1])


def _bisect(f, lo: float, hi: float, xtol: float) -> float:
    flo, fhi = f(lo), f(hi)
    if flo * fhi > 0:
        raise ValueError(f"target not bracketed by [{lo}, {hi}]")
    return float(optimize.bisect(f, lo, hi, xtol=xtol))


def calibrate_alpha0(target: float = 0.29, alpha1: float = 0.0, beta=DEFAULT_BETA,
                     k: int = 180, lo: float = -15.0, hi: float = 0.0) -> float:
    return _bisect(lambda x: mortality(x, alpha1, beta, k) - target, lo, hi, 1e-10)


def calibrate_mu(target: float = 14.9, alpha0: float | None = None, k: int = 180,
                 tau: int = 180, lo: float = 0.0, hi: float = 400.0) -> float:
    if target == 0:
        return 0.0
    base = DgpConfig(k=k, tau=tau, alpha0=alpha0)
    return _bisect(lambda mu: exact_theta(replace(base, mu=mu)) - target, lo, hi, 1e-8)


def calibrate(mortality_target: float = 0.29, theta_target: float = 14.9, k: int = 180,
              tau: int = 180, n_dropout: int = 20_000, seed: int = 0) -> dict:
    """Calibrate ``alpha0`` and ``mu`` and report simulated drop-out shares."""
    alpha0 = calibrate_alpha0(mortality_target, k=k)
    mu = calibrate_mu(theta_target, alpha0, k, tau)
    drop = {}
    for cens in ("non_informative", "informative"):
        for scen in SCENARIOS:
            for label, m in (("zero", 0.0), ("positive", mu)):
                cfg = DgpConfig(n=n_dropout, k=k, tau=tau, scenario=scen, censoring=cens,
                                mu=m, alpha0=alpha0, seed=seed)
                drop[f"{cens}/{scen}/{label}"] = round(dropout_fraction(gen_trial(cfg)), 4)
    return {
        "alpha0": alpha0,
        "alpha1": 0.0,
        "mu": mu,
        "beta": list(DEFAULT_BETA),
        "k": k,
        "tau": tau,
        "mortality_target": mortality_target,
        "mortality": mortality(alpha0, k=k),
        "theta_target": theta_target,
        "theta": exact_theta(DgpConfig(k=k, tau=tau, mu=mu, alpha0=alpha0)),
        "dropout": drop,
    }


# ---------------------------------------------------------------- studies


@dataclass
class CellResult:
    """Replicate estimates for one design cell."""

    config: DgpConfig
    oracle: float
    estimates: dict[str, np.ndarray]  # estimator -> (R,), NaN where failed
    seeds: list[list[int]]

    def summary(self, km_name: str = "km") -> list[dict]:
        rows = []
        km = self.estimates.get(km_name)
        km_mse = None
        if km is not None and np.isfinite(km).any():
            km_ok = km[np.isfinite(km)]
            km_mse = float(np.mean((km_ok - self.oracle) ** 2))
        for name, est in self.estimates.items():
            ok = est[np.isfinite(est)]
            n_fail = int(len(est) - len(ok))
            bias = float(np.mean(ok) - self.oracle) if len(ok) else float("nan")
            var = float(np.var(ok)) if len(ok) else float("nan")
            mse = bias ** 2 + var
            sd = float(np.std(ok, ddof=1)) if len(ok) > 1 else float("nan")
            rows.append({
                "scenario": self.config.scenario,
                "censoring": self.config.censoring,
                "effect": self.config.effect,
                "n": self.config.n,
                "estimator": name,
                "replicates": len(ok),
                "failures": n_fail,
                "flagged": n_fail > 0.01 * len(est),
                "oracle_theta": self.oracle,
                "mean": float(np.mean(ok)) if len(ok) else float("nan"),
                "bias": bias,
                "variance": var,
                "mse": mse,
                "rmse": (km_mse / mse) if km_mse is not None and mse > 0 else float("nan"),
                "mc_se": sd / math.sqrt(len(ok)) if len(ok) > 1 else float("nan"),
            })
        return rows


@dataclass
class SimReport:
    cells: list[CellResult]
    master_seed: int
    replicates: int
    estimators: tuple[str, ...]
    specs: dict = field(default_factory=dict)

    CSV_FIELDS = ("cell", "scenario", "censoring", "effect", "n", "estimator", "replicates",
                  "failures", "flagged", "oracle_theta", "mean", "bias", "variance", "mse",
                  "rmse", "mc_se")

    def rows(self) -> list[dict]:
        out = []
        for ci, cell in enumerate(self.cells):
            for row in cell.summary():
                out.append({"cell": ci, **row})
        return out

    def lookup(self, cell: int, estimator: str) -> dict:
        for row in self.rows():
            if row["cell"] == cell and row["estimator"] == estimator:
                return row
        raise KeyError((cell, estimator))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def to_json_dict(self) -> dict:
        return {
            "schema": "rmst-tmle/simreport/1",
            "master_seed": self.master_seed,
            "replicates": self.replicates,
            "estimators": list(self.estimators),
            "specs": self.specs,
            "cells": [
                {
                    "index": ci,
                    "config": _config_dict(cell.config),
                    "oracle_theta": cell.oracle,
                    "replicate_seeds": cell.seeds,
                    "summary": [_clean(r) for r in cell.summary()],
                }
                for ci, cell in enumerate(self.cells)
            ],
        }


def _fmt(v: float) -> str:
    return "nan" if not math.isfinite(v) else repr(v)


def _clean(row: dict) -> dict:
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v)
            for k, v in row.items()}


def _config_dict(cfg: DgpConfig) -> dict:
    d = asdict(cfg)
    d["alpha0"] = cfg.intercept
    d["beta"] = list(cfg.beta)
    return d


def _replicate(args) -> tuple[int, int, dict[str, float]]:
    from .estimators import estimate_thetas

    cell_idx, rep, master_seed, config, names, est_config = args
    rng = make_rng(master_seed, cell_idx, rep)
    data = gen_trial(config, rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        values = estimate_thetas(data, names, est_config)
    return cell_idx, rep, values


def run_study(grid, estimators=("km", "ipw", "adj-ipw", "aipw", "tmle"), replicates: int = 100,
              master_seed: int = 0, jobs: int = 1, h_spec: str = SIM_H_SPEC,
              g_r_spec: str = SIM_GR_SPEC, g_a_spec: str = SIM_GA_SPEC,
              progress=None) -> SimReport:
    """Run every estimator on ``replicates`` trials of every cell in ``grid``.

    Results are aggregated by index, so the report does not depend on
    ``jobs``.
    """
    from .tmle import TmleConfig

    grid = list(grid)
    names = tuple(estimators)
    tasks = []
    for ci, cfg in enumerate(grid):
        est_cfg = TmleConfig(tau=cfg.tau, h_spec=h_spec, g_r_spec=g_r_spec, g_a_spec=g_a_spec)
        for r in range(replicates):
            tasks.append((ci, r, master_seed, cfg, names, est_cfg))
    est = [{nm: np.full(replicates, np.nan) for nm in names} for _ in grid]

    def collect(res):
        ci, r, values = res
        for nm, v in values.items():
            est[ci][nm][r] = v
        if progress is not None:
            progress(ci, r)

    if jobs <= 1:
        for t in tasks:
            collect(_replicate(t))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for res in pool.map(_replicate, tasks, chunksize=max(1, len(tasks) // (8 * jobs))):
                collect(res)

    cells = [CellResult(cfg, exact_theta(cfg), est[ci],
                        [[master_seed, ci, r] for r in range(replicates)])
             for ci, cfg in enumerate(grid)]
    return SimReport(cells, master_seed, replicates, names,
                     {"h": h_spec, "g_R": g_r_spec, "g_A": g_a_spec})


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("RMST_TMLE_JOBS", "1")))
    except ValueError:
        return 1


def write_fixtures(path: str | Path, **kwargs) -> dict:
    fx = calibrate(**kwargs)
    Path(path).write_text(json.dumps(fx, indent=2) + "\n")
    return fx
