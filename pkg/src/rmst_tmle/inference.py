"""Wald and nonparametric-bootstrap confidence intervals."""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .core_data import Dataset
from .estimators import RECOVERABLE, estimate
from .streams import make_rng
from .tmle import TmleConfig

__all__ = [
    "InferenceResult",
    "BootstrapResult",
    "BootstrapError",
    "normal_quantile",
    "wald_ci",
    "empirical_quantile",
    "bootstrap",
    "bootstrap_many",
]

METHODS = ("wald_plugin", "wald_bootstrap", "percentile_bootstrap")
MAX_FAILED_SHARE = 0.10


class BootstrapError(RuntimeError):
    """Too many bootstrap replicates failed."""

    def __init__(self, failed: int, total: int, messages: list[str]):
        self.failed, self.total, self.messages = failed, total, messages
        head = "; ".join(messages[:3])
        super().__init__(f"{failed} of {total} bootstrap replicates failed ({head})")


@dataclass(frozen=True)
class InferenceResult:
    point: float
    se: float
    ci_low: float
    ci_high: float
    method: str
    alpha: float
    B: int | None = None
    seed: int | None = None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("point", "se", "ci_low", "ci_high", "method", "alpha", "B", "seed")}


@dataclass
class BootstrapResult:
    """Both bootstrap intervals plus the replicate estimates (NaN = failed)."""

    wald: InferenceResult
    percentile: InferenceResult
    replicates: np.ndarray
    failed: int
    failure_messages: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"wald_bootstrap": self.wald.to_dict(),
                "percentile_bootstrap": self.percentile.to_dict(),
                "failed_replicates": self.failed}


def normal_quantile(p: float) -> float:
    return float(norm.ppf(p))


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def wald_ci(theta_hat: float, se: float, alpha: float = 0.05,
            method: str = "wald_plugin", B: int | None = None,
            seed: int | None = None) -> InferenceResult:
    """``theta_hat -/+ z_{1 - alpha/2} se``."""
    _check_alpha(alpha)
    if se < 0 or math.isnan(se):
        raise ValueError(f"se must be >= 0, got {se}")
    half = normal_quantile(1.0 - alpha / 2.0) * se
    return InferenceResult(theta_hat, se, theta_hat - half, theta_hat + half, method, alpha,
                           B, seed)


def empirical_quantile(values: np.ndarray, p: float) -> float:
    """Inverse of the empirical CDF: the ``ceil(p B)``-th order statistic."""
    x = np.sort(np.asarray(values, dtype=float))
    if x.size == 0:
        raise ValueError("no values")
    k = max(1, math.ceil(p * x.size - 1e-12))
    return float(x[min(k, x.size) - 1])


def _one_replicate(args) -> tuple[int, dict[str, float], str | None]:
    r, dataset, names, config, seed = args
    rng = make_rng(seed, r)
    idx = rng.integers(0, dataset.n, dataset.n)
    sample = dataset.subset(idx, relabel=True)
    values, msg = {}, None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for nm in names:
            try:
                values[nm] = estimate(sample, (nm,), config)[nm].theta
            except RECOVERABLE as exc:
                values[nm] = math.nan
                msg = f"replicate {r} ({nm}): {type(exc).__name__}: {exc}"
    return r, values, msg


def _summarize(point: float, reps: np.ndarray, messages: list[str], alpha: float, B: int,
               seed: int) -> BootstrapResult:
    ok = reps[np.isfinite(reps)]
    failed = B - ok.size
    if failed > MAX_FAILED_SHARE * B or ok.size < 2:
        raise BootstrapError(failed, B, messages)
    se = float(np.std(ok, ddof=1))
    wald = wald_ci(point, se, alpha, "wald_bootstrap", B, seed)
    pct = InferenceResult(point, se, empirical_quantile(ok, alpha / 2.0),
                          empirical_quantile(ok, 1.0 - alpha / 2.0), "percentile_bootstrap",
                          alpha, B, seed)
    return BootstrapResult(wald, pct, reps, failed, messages)


def bootstrap_many(dataset: Dataset, names, config: TmleConfig, B: int = 1000, seed: int = 0,
                   alpha: float = 0.05, jobs: int = 1,
                   points: dict[str, float] | None = None) -> dict[str, BootstrapResult]:
    """Bootstrap several estimators on the same resamples.

    Replicate ``r`` draws its resample from the stream ``(seed, r)``, so the
    result for a given estimator does not depend on which others are run
    alongside it, nor on ``jobs``.
    """
    _check_alpha(alpha)
    if B < 2:
        raise ValueError("B must be >= 2")
    names = tuple(names)
    if points is None:
        res = estimate(dataset, names, config)
        points = {nm: res[nm].theta for nm in names}
    tasks = [(r, dataset, names, config, seed) for r in range(B)]
    if jobs <= 1:
        results = [_one_replicate(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_one_replicate, tasks, chunksize=max(1, B // (4 * jobs))))
    reps = {nm: np.full(B, math.nan) for nm in names}
    messages: list[str] = []
    for r, values, msg in results:
        for nm, v in values.items():
            reps[nm][r] = v
        if msg is not None:
            messages.append(msg)
    return {nm: _summarize(points[nm], reps[nm], [m for m in messages if f"({nm})" in m],
                           alpha, B, seed) for nm in names}


def bootstrap(dataset: Dataset, estimator: str, config: TmleConfig, B: int = 1000,
              seed: int = 0, alpha: float = 0.05, jobs: int = 1,
              point: float | None = None) -> BootstrapResult:
    """Nonparametric bootstrap over subjects.

    Replicate ``r`` resamples ``n`` subjects with replacement using the
    stream ``(seed, r)`` and re-runs the whole estimator, working-model fits
    included.  Failed replicates are dropped and counted; more than 10%
    failures raise :class:`BootstrapError`.

    Parameters
    ----------
    point : float, optional
        Point estimate on the original data; computed when omitted.
    """
    points = None if point is None else {estimator: point}
    return bootstrap_many(dataset, (estimator,), config, B, seed, alpha, jobs, points)[estimator]
