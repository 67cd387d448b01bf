import warnings

import numpy as np
import pytest
from scipy.special import expit

from rmst_tmle.curves import theta_km
from rmst_tmle.eif import NuisanceBundle
from rmst_tmle.glm import SpecError
from rmst_tmle.sim import SIM_GA_SPEC, SIM_GR_SPEC, SIM_H_SPEC, DgpConfig, gen_trial
from rmst_tmle.streams import make_rng
from rmst_tmle.tmle import (
    TmleConfig,
    _Rows,
    fit_initial,
    target_censoring,
    target_hazard,
    target_treatment,
    tmle_fit,
)

from helpers import hand_dataset


def _sim_data(scenario="A", censoring="informative", n=300, seed=0):
    return gen_trial(DgpConfig(n=n, scenario=scenario, censoring=censoring),
                     make_rng(42, 0, seed))


def _cfg(**kw):
    return TmleConfig(tau=180, h_spec=SIM_H_SPEC, g_r_spec=SIM_GR_SPEC, g_a_spec=SIM_GA_SPEC,
                      **kw)


def reference_loop(data, cfg, iterations):
    """Sub-steps one at a time through the numpy reference functions."""
    init = fit_initial(data, cfg)
    rows = _Rows(data, cfg.tau)
    h, g, a = init.h_logit, init.g_r_logit, init.g_a_logit
    hist = []
    for _ in range(iterations):
        b = NuisanceBundle(expit(h), expit(g), expit(a))
        h, eps, _ = target_hazard(b, h, data, rows, cfg.prob_lo, cfg.prob_hi)
        b = NuisanceBundle(expit(h), b.g_r, b.g_a1)
        g, gamma, _ = target_censoring(b, g, data, rows, cfg.prob_lo, cfg.prob_hi)
        b = NuisanceBundle(b.h, expit(g), b.g_a1)
        a, nu, _ = target_treatment(b, a, data, cfg.prob_lo, cfg.prob_hi)
        hist.append((eps, gamma, nu))
    s = NuisanceBundle(expit(h), expit(g), expit(a)).survival.mean(axis=0)
    return s[1].sum() - s[0].sum(), hist


@pytest.mark.parametrize("scenario, censoring", [("A", "informative"),
                                                 ("C", "non_informative")])
def test_compiled_loop_matches_reference(scenario, censoring):
    data = _sim_data(scenario, censoring)
    cfg = _cfg()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = tmle_fit(data, cfg)
        theta, hist = reference_loop(data, cfg, res.iterations_used)
    assert res.theta_hat == pytest.approx(theta, abs=1e-9)
    for k, (eps, gamma, nu) in enumerate(hist):
        np.testing.assert_allclose(res.epsilon_history[k], eps, rtol=1e-6, atol=1e-10)
        assert res.gamma_history[k] == pytest.approx(gamma, rel=1e-6, abs=1e-10)
        assert res.nu_history[k] == pytest.approx(nu, rel=1e-6, abs=1e-10)


def test_result_is_internally_consistent():
    data = _sim_data(seed=3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = tmle_fit(data, _cfg())
    assert res.converged and 1 <= res.iterations_used <= 50
    assert res.theta_hat == pytest.approx(res.rmst_by_arm[1] - res.rmst_by_arm[0])
    for arm, curve in enumerate(res.survival_curves):
        assert curve.values[0] == 1.0 and curve.monotone
        assert curve.values.sum() == pytest.approx(res.rmst_by_arm[arm])
    assert res.se_plugin == pytest.approx(np.std(res.eif, ddof=1) / np.sqrt(data.n))
    assert abs(res.mean_eif) < 1e-3
    out = res.to_dict()
    assert out["diagnostics"]["iterations"] == res.iterations_used
    assert len(out["curves"]["S_arm1"]) == 180


def test_hand_data_saturated_reduces_to_km():
    data = hand_dataset()
    cfg = TmleConfig(tau=3, h_spec="saturated(t,a)", g_r_spec="saturated(t,a)",
                     g_a_spec="1", prob_lo=1e-15, prob_hi=1 - 1e-15)
    assert tmle_fit(data, cfg).theta_hat == pytest.approx(theta_km(data, 3), abs=1e-10)


def test_max_iter_cap_reports_not_converged():
    data = _sim_data(seed=5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = tmle_fit(data, _cfg(max_iter=1, tol_scale=1e-30))
    assert res.iterations_used == 1 and not res.converged


def test_probability_scale_stopping_stops_earlier():
    data = _sim_data(seed=6)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        logit_run = tmle_fit(data, _cfg())
        prob_run = tmle_fit(data, _cfg(stop_scale="prob"))
    assert prob_run.iterations_used <= logit_run.iterations_used


@pytest.mark.parametrize("kw", [{"tau": 1}, {"max_iter": 0}, {"prob_lo": 0.6},
                                {"prob_hi": 0.4}])
def test_config_validation(kw):
    base = {"tau": 3}
    base.update(kw)
    with pytest.raises(ValueError):
        TmleConfig(**base)


def test_bad_spec_surfaces_as_spec_error():
    with pytest.raises(SpecError):
        tmle_fit(hand_dataset(), TmleConfig(tau=3, h_spec="1 + w4"))
