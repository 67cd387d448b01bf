import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rmst_tmle.inference import (
    BootstrapError,
    bootstrap,
    bootstrap_many,
    empirical_quantile,
    normal_quantile,
    wald_ci,
)
from rmst_tmle.tmle import TmleConfig

from helpers import make_dataset


def test_normal_quantile_reference_values():
    assert normal_quantile(0.975) == pytest.approx(1.959963984540054, abs=1e-12)
    assert normal_quantile(0.84) == pytest.approx(0.994457883209753, abs=1e-12)


def test_wald_interval():
    ci = wald_ci(2.0, 0.5)
    assert ci.ci_low == pytest.approx(2.0 - 0.979981992270027)
    assert ci.ci_high == pytest.approx(2.0 + 0.979981992270027)
    wide = wald_ci(0.0, 1.0, alpha=0.32)
    assert wide.ci_high == pytest.approx(0.994457883209753)
    zero = wald_ci(1.5, 0.0)
    assert zero.ci_low == zero.ci_high == 1.5


@pytest.mark.parametrize("alpha, se", [(0.0, 1.0), (1.0, 1.0), (0.05, -1.0),
                                       (0.05, float("nan"))])
def test_wald_rejects_bad_inputs(alpha, se):
    with pytest.raises(ValueError):
        wald_ci(0.0, se, alpha)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50), st.floats(0.001, 0.999))
def test_empirical_quantile_is_an_order_statistic(values, p):
    q = empirical_quantile(np.array(values), p)
    x = np.sort(values)
    assert q in x
    assert np.mean(x <= q) >= p - 1e-9


def test_empirical_quantile_small_case():
    x = np.arange(1.0, 11.0)
    assert empirical_quantile(x, 0.025) == 1.0
    assert empirical_quantile(x, 0.975) == 10.0
    assert empirical_quantile(x, 0.5) == 5.0


def _data(n=60, seed=0):
    rng = np.random.default_rng(seed)
    t = rng.integers(1, 6, n)
    c = np.where(rng.random(n) < 0.3, rng.integers(1, 6, n), 5)
    return make_dataset(np.minimum(t, c), (t <= c).astype(int), np.arange(n) % 2, k=5)


def test_identical_subjects_give_zero_bootstrap_se():
    data = make_dataset([2] * 10, [1] * 10, [0, 1] * 5, k=3)
    res = bootstrap(data, "km", TmleConfig(tau=3), B=20, seed=1)
    assert res.wald.se == 0.0
    assert res.percentile.ci_low == res.percentile.ci_high == 0.0


def test_bootstrap_is_deterministic_and_job_independent():
    data = _data()
    cfg = TmleConfig(tau=4)
    one = bootstrap(data, "km", cfg, B=30, seed=11, jobs=1)
    two = bootstrap(data, "km", cfg, B=30, seed=11, jobs=2)
    assert np.array_equal(one.replicates, two.replicates)
    other = bootstrap(data, "km", cfg, B=30, seed=12)
    assert not np.array_equal(one.replicates, other.replicates)


def test_bootstrap_many_matches_single_runs():
    data = _data(seed=2)
    cfg = TmleConfig(tau=4)
    both = bootstrap_many(data, ("km", "ipw"), cfg, B=25, seed=4)
    single = bootstrap(data, "ipw", cfg, B=25, seed=4)
    assert np.array_equal(both["ipw"].replicates, single.replicates)
    assert both["km"].wald.point == both["km"].percentile.point


def test_bootstrap_fails_loudly_when_most_replicates_fail():
    # one arm member: resamples frequently lose the arm entirely
    data = make_dataset([1, 2, 3, 2, 1, 3, 2, 2], [1] * 8, [1, 0, 0, 0, 0, 0, 0, 0], k=3)
    with pytest.raises(BootstrapError):
        bootstrap(data, "km", TmleConfig(tau=3), B=50, seed=0)


def test_bootstrap_argument_checks():
    with pytest.raises(ValueError):
        bootstrap(_data(), "km", TmleConfig(tau=4), B=1)
    with pytest.raises(ValueError):
        bootstrap(_data(), "km", TmleConfig(tau=4), B=10, alpha=1.5)
