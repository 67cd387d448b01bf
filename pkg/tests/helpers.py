"""Dataset builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from rmst_tmle.core_data import Dataset
from rmst_tmle.curves import km_censoring

HAND_ARM1 = {"t": (1, 2, 2, 3), "d": (1, 1, 0, 1)}
HAND_ARM0 = {"t": (1, 1, 2, 3), "d": (1, 1, 1, 0)}


def make_dataset(t, d, a, w=None, k=None) -> Dataset:
    t = np.asarray(t, dtype=np.int64)
    n = len(t)
    w = np.zeros((n, 0)) if w is None else np.asarray(w, dtype=float).reshape(n, -1)
    return Dataset(ids=tuple(str(i) for i in range(n)), w=w, a=np.asarray(a), delta=np.asarray(d),
                   t_tilde=t, k_max=int(t.max()) if k is None else k,
                   covariate_names=tuple(f"w{j + 1}" for j in range(w.shape[1])))


def hand_dataset() -> Dataset:
    t = HAND_ARM1["t"] + HAND_ARM0["t"]
    d = HAND_ARM1["d"] + HAND_ARM0["d"]
    return make_dataset(t, d, [1] * 4 + [0] * 4)


def random_small(rng: np.random.Generator, n_max: int = 20, k_max: int = 6, p: int = 0,
                 censor_rate: float = 0.3) -> Dataset:
    """Random discrete-time dataset with both arms present."""
    while True:
        n = int(rng.integers(4, n_max + 1))
        k = int(rng.integers(2, k_max + 1))
        a = rng.integers(0, 2, n)
        if a.min() == a.max():
            continue
        t_ev = rng.integers(1, k + 2, n)  # k+1 means no event by k
        c = np.where(rng.random(n) < censor_rate, rng.integers(0, k + 1, n), k)
        d = (t_ev <= c).astype(int)
        t = np.minimum(t_ev, c)
        w = rng.standard_normal((n, p))
        return make_dataset(t, d, a, w, k)


def censoring_weights_positive(data: Dataset, tau: int) -> bool:
    """Kaplan-Meier censoring survival positive on ``t <= tau-1`` in both arms."""
    return all(km_censoring(data, arm, tau).values[:tau].min() > 0 for arm in (0, 1))
