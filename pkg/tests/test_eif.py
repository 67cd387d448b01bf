import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logit

from rmst_tmle import _kernels as _k
from rmst_tmle.curves import theta_km
from rmst_tmle.eif import (
    NuisanceBundle,
    aux_H,
    aux_M,
    aux_Z,
    eval_D_car,
    eval_D_km,
    eval_eif,
    h_grid,
    m_vector,
    marginal_bundle,
    theta_aipw,
    z_grid,
)

from helpers import censoring_weights_positive, make_dataset, random_small


def random_bundle(rng, n=7, tau=6) -> NuisanceBundle:
    h = rng.uniform(0.01, 0.4, (n, 2, tau))
    h[:, :, 0] = 0.0
    g = rng.uniform(0.0, 0.3, (n, 2, tau))
    return NuisanceBundle(h, g, rng.uniform(0.2, 0.8, n))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_tail_sum_matches_direct_sum(seed):
    b = random_bundle(np.random.default_rng(seed))
    s = b.survival
    for m in range(b.tau):
        direct = s[:, :, m:].sum(axis=2) / s[:, :, m]
        np.testing.assert_allclose(b.tail_sum[:, :, m], direct, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_compiled_covariates_match_numpy(seed):
    b = random_bundle(np.random.default_rng(seed))
    with np.errstate(divide="ignore"):
        hl, gl = logit(b.h), logit(b.g_r)
    np.testing.assert_allclose(_k.clever_z(hl, gl, b.g_a1), z_grid(b), rtol=1e-10)
    np.testing.assert_allclose(_k.clever_h(hl, gl, b.g_a1), h_grid(b), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(_k.clever_m(hl, b.g_a1), m_vector(b), rtol=1e-10)


def test_pointwise_helpers_agree_with_grids():
    b = random_bundle(np.random.default_rng(2))
    z, hc, mv = z_grid(b), h_grid(b), m_vector(b)
    assert aux_Z(b, 3, 2, 1, 1) == pytest.approx(z[3, 1, 2])
    assert aux_Z(b, 3, 2, 1, 0) == 0.0
    assert aux_H(b, 1, 0, 0) == pytest.approx(hc[1, 0, 0])
    assert aux_M(b, 4) == pytest.approx(mv[4])
    with pytest.raises(ValueError):
        aux_Z(b, 0, 0, 1, 1)


def test_z_is_minus_one_over_weight_at_last_time():
    b = random_bundle(np.random.default_rng(4))
    tau = b.tau
    expected = -1.0 / (b.g_a * b.censoring[:, :, tau - 1])
    np.testing.assert_allclose(z_grid(b)[:, :, tau - 1], expected)
    np.testing.assert_allclose(h_grid(b)[:, :, tau - 1], 0.0, atol=0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_aipw_with_marginal_hazards_is_km(seed):
    data = random_small(np.random.default_rng(seed))
    tau = data.k_max
    if tau < 2 or not censoring_weights_positive(data, tau):
        return
    bundle = marginal_bundle(data, tau)
    theta = theta_km(data, tau)
    assert theta_aipw(data, bundle).theta == pytest.approx(theta, abs=1e-10)
    eif = eval_eif(data, bundle, theta)
    np.testing.assert_allclose(eif.values, eval_D_km(data, bundle), atol=1e-10)
    assert abs(eif.mean) < 1e-10


def test_km_influence_function_matches_numerical_derivative():
    rng = np.random.default_rng(0)
    n, k, tau = 3000, 6, 5
    a = rng.integers(0, 2, n)
    t = rng.integers(1, 8, n)
    c = np.where(rng.random(n) < 0.4, rng.integers(0, 7, n), k)
    data = make_dataset(np.minimum(t, c), (t <= c).astype(int), a, k=k)
    d_km = eval_D_km(data, marginal_bundle(data, tau))
    base = theta_km(data, tau)
    for i in range(6):
        bumped = theta_km(data.subset(np.r_[np.arange(n), i]), tau)
        assert (bumped - base) * (n + 1) == pytest.approx(d_km[i], rel=2e-3)


def test_d_km_rejects_covariate_bundle():
    data = random_small(np.random.default_rng(1), p=1)
    b = random_bundle(np.random.default_rng(1), n=data.n, tau=2)
    with pytest.raises(ValueError):
        eval_D_km(data, b)


def test_car_term_vanishes_at_marginal_fit():
    # product-limit censoring hazards and the arm share solve their own scores
    data = random_small(np.random.default_rng(11), n_max=40)
    tau = data.k_max
    assert abs(eval_D_car(data, marginal_bundle(data, tau)).mean()) < 1e-10


def test_bundle_shape_checks():
    with pytest.raises(ValueError):
        NuisanceBundle(np.zeros((3, 2, 4)), np.zeros((3, 2, 3)), np.zeros(3))
    with pytest.raises(ValueError):
        NuisanceBundle(np.zeros((3, 2, 1)), np.zeros((3, 2, 1)), np.zeros(3))
