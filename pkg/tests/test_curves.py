import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmst_tmle.curves import (
    DegenerateWeightsError,
    PositivityWarning,
    adjusted_ipw_survival,
    censoring_from_hazard,
    ipw_survival,
    km_censoring,
    km_survival,
    rmst_from_curve,
    survival_from_hazard,
    theta_ipw_unadjusted,
    theta_km,
)

from helpers import censoring_weights_positive, hand_dataset, make_dataset, random_small


def test_hand_survival_curves():
    data = hand_dataset()
    np.testing.assert_allclose(km_survival(data, 1, 3).values, [1.0, 0.75, 0.5])
    np.testing.assert_allclose(km_survival(data, 0, 3).values, [1.0, 0.5, 0.25])
    assert rmst_from_curve(km_survival(data, 1, 3)) == pytest.approx(2.25)
    assert theta_km(data, 3) == pytest.approx(0.5)


def test_hand_censoring_curves():
    data = hand_dataset()
    np.testing.assert_allclose(km_censoring(data, 1, 3).values, [1, 1, 1, 0.5])
    np.testing.assert_allclose(km_censoring(data, 0, 3).values, [1, 1, 1, 1])


def test_tau_one_gives_unit_rmst():
    assert rmst_from_curve(km_survival(hand_dataset(), 1, 1)) == 1.0


def test_tau_beyond_k_rejected():
    with pytest.raises(ValueError, match="exceeds K"):
        km_survival(hand_dataset(), 1, 4)


def test_product_helpers_on_grid():
    h = np.array([[0.0, 0.5, 0.5], [0.9, 0.0, 1.0]])
    np.testing.assert_allclose(survival_from_hazard(h), [[1, 0.5, 0.25], [1, 1, 0]])
    np.testing.assert_allclose(censoring_from_hazard(np.array([0.5, 0.0])), [1, 0.5, 0.5])


def test_rmst_rejects_short_curve():
    with pytest.raises(ValueError):
        rmst_from_curve(np.ones(3), tau=4)


def test_ipw_equals_km_without_censoring():
    rng = np.random.default_rng(3)
    t = rng.integers(1, 8, 40)
    data = make_dataset(t, np.ones(40), rng.integers(0, 2, 40), k=7)
    assert abs(theta_ipw_unadjusted(data, 7) - theta_km(data, 7)) <= 1e-10


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ipw_with_km_weights_reproduces_km(seed):
    data = random_small(np.random.default_rng(seed))
    tau = data.k_max
    if not censoring_weights_positive(data, tau):
        return
    for arm in (0, 1):
        np.testing.assert_allclose(ipw_survival(data, arm, tau).values,
                                   km_survival(data, arm, tau).values, atol=1e-12)


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_km_is_monotone_and_bounded(seed):
    data = random_small(np.random.default_rng(seed), censor_rate=0.6)
    tau = data.k_max
    for arm in (0, 1):
        s = km_survival(data, arm, tau)
        assert s.monotone and s.values[0] == 1.0 and s.values.min() >= 0.0
        assert 1.0 <= rmst_from_curve(s) <= tau


def test_ipw_degenerate_weights():
    # arm 1: everyone censored at time 1, so G(2) = 0 while t = 2 is needed
    data = make_dataset([1, 1, 3, 3], [0, 0, 1, 1], [1, 1, 0, 0], k=3)
    with pytest.raises(DegenerateWeightsError):
        ipw_survival(data, 1, 3)


def test_adjusted_ipw_known_weights_and_positivity_warning():
    data = make_dataset([2, 2, 2, 2], [1, 1, 1, 1], [1, 1, 0, 0], k=2)
    g_a = np.full(4, 0.5)
    g_r = np.zeros((4, 2))
    np.testing.assert_allclose(adjusted_ipw_survival(data, 1, 2, g_a, g_r).values, [1, 1])
    with pytest.warns(PositivityWarning):
        adjusted_ipw_survival(data, 1, 2, np.full(4, 1e-8), g_r)
