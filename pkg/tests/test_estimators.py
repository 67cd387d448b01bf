import warnings

import numpy as np
import pytest

from rmst_tmle.curves import theta_km
from rmst_tmle.eif import eval_D_km, marginal_bundle
from rmst_tmle.estimators import ESTIMATORS, estimate, estimate_thetas
from rmst_tmle.sim import SIM_GA_SPEC, SIM_GR_SPEC, SIM_H_SPEC, DgpConfig, gen_trial
from rmst_tmle.streams import make_rng
from rmst_tmle.tmle import TmleConfig

from helpers import hand_dataset


@pytest.fixture(scope="module")
def trial():
    return gen_trial(DgpConfig(n=400, scenario="B", censoring="informative"), make_rng(31))


@pytest.fixture(scope="module")
def config():
    return TmleConfig(tau=180, h_spec=SIM_H_SPEC, g_r_spec=SIM_GR_SPEC, g_a_spec=SIM_GA_SPEC)


def test_all_estimators_run_and_agree_roughly(trial, config):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = estimate(trial, ESTIMATORS, config)
    assert tuple(res) == ESTIMATORS
    thetas = np.array([r.theta for r in res.values()])
    assert np.all(np.isfinite(thetas))
    assert np.ptp(thetas) < 10.0
    for nm, r in res.items():
        assert r.theta == pytest.approx(r.rmst[1] - r.rmst[0])
        assert (r.se is None) == (nm == "adj-ipw")


def test_km_se_from_influence_function(trial, config):
    res = estimate(trial, ("km",), config)["km"]
    d = eval_D_km(trial, marginal_bundle(trial, 180))
    assert res.se == pytest.approx(np.std(d, ddof=1) / np.sqrt(trial.n))
    assert res.theta == pytest.approx(theta_km(trial, 180))


def test_subset_request_preserves_order(trial, config):
    res = estimate(trial, ("tmle", "km"), config)
    assert list(res) == ["tmle", "km"]


def test_unknown_estimator_and_missing_config():
    with pytest.raises(ValueError):
        estimate(hand_dataset(), ("magic",), TmleConfig(tau=3))
    with pytest.raises(ValueError):
        estimate(hand_dataset(), ("km",), None)


def test_estimate_thetas_marks_failures_nan():
    cfg = TmleConfig(tau=3, h_spec="1 + w3")  # no covariates: the fit cannot be built
    out = estimate_thetas(hand_dataset(), ("km", "tmle"), cfg)
    assert out["km"] == pytest.approx(0.5)
    assert np.isnan(out["tmle"])
