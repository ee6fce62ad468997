import json
from dataclasses import replace

import numpy as np
import pytest

from conftest import random_dataset

from progscore.data import DataError
from progscore.em import (
    CORRELATED,
    INDEPENDENT,
    FitConfig,
    _informative,
    aic_value,
    dumps_model,
    fit,
    loads_model,
    marginal_loglik,
    n_params,
    predict_ps,
    predict_traj,
    reparameterize,
    reparameterize_posteriors,
    standardize,
)
from progscore.estep import e_step
from progscore.params import ModelParams
from progscore.simulation import SimDesign, simulate
from progscore.spatial import NoiseCov

SMALL = dict(n=40, max_visits=4, grid_shape=(3, 3, 2), family="exponential", rho=5.0, a_range=(0.2, 0.6))


@pytest.fixture(scope="module")
def small():
    d, truth = simulate(SimDesign(seed=1, **SMALL))
    model = fit(d, FitConfig(kernel="exponential"))
    return d, truth, model


def test_loglik_monotone_within_each_stage(small):
    _, _, model = small
    assert model.monotone_violations == 0
    for stage in (INDEPENDENT, CORRELATED):
        ll = [r["loglik"] for r in model.iteration_log if r["stage"] == stage]
        assert len(ll) >= 2
        assert np.all(np.diff(ll) >= -1e-8)


def test_baseline_scores_standardized(small):
    d, _, model = small
    s0 = model.scores[d.baseline_rows]
    assert abs(s0.mean()) < 1e-10
    assert abs(s0.std() - 1.0) < 1e-10
    assert model.theta.a.mean() >= 0


def test_standardize_idempotent(small):
    d, _, model = small
    _, _, w, z, flipped = standardize(model.theta, model.posteriors, d)
    assert w == pytest.approx(1.0, abs=1e-10) and abs(z) < 1e-10 and not flipped


def test_loglik_matches_recomputation(small):
    d, _, model = small
    assert marginal_loglik(d, model.theta) == pytest.approx(model.loglik, rel=1e-9)


def test_reparameterization_invariance(small):
    d, _, model = small
    rng = np.random.default_rng(0)
    theta = model.theta
    ll0 = marginal_loglik(d, theta)
    s = np.linspace(-2, 3, 7)
    traj = predict_traj(theta, s)
    for _ in range(100):
        w = rng.uniform(0.2, 5.0) * rng.choice([-1, 1])
        z = rng.normal(0, 3)
        th = reparameterize(theta, w, z)
        assert marginal_loglik(d, th) == pytest.approx(ll0, rel=1e-8)
        assert np.allclose(predict_traj(th, w * s + z), traj, rtol=1e-10, atol=1e-10)


def test_posterior_reparameterization_matches_estep(small):
    d, _, model = small
    th = reparameterize(model.theta, -2.5, 0.7)
    direct = e_step(d, th)
    mapped = reparameterize_posteriors(model.posteriors, -2.5, 0.7)
    assert np.allclose(direct.u_hat, mapped.u_hat, rtol=1e-8, atol=1e-9)
    assert np.allclose(direct.sigma, mapped.sigma, rtol=1e-8, atol=1e-14)
    assert np.allclose(direct.s, mapped.s, rtol=1e-8, atol=1e-9)


def test_sign_flip_when_slopes_negative():
    d, _ = simulate(SimDesign(seed=2, **{**SMALL, "a_range": (-0.6, -0.2)}))
    model = fit(d, FitConfig(stages=1))
    assert model.theta.a.mean() > 0


def test_param_counts_and_aic():
    assert n_params(1, INDEPENDENT) == 8
    assert aic_value(0.0, 1, INDEPENDENT) == 16.0
    for K in (1, 5, 125):
        assert n_params(K, CORRELATED) == n_params(K, INDEPENDENT) - K + 2
    assert aic_value(-10.0, 3, CORRELATED) == 2 * (5 + 6 + 2) + 20


def test_model_aic_fields(small):
    d, _, model = small
    assert model.aic == pytest.approx(aic_value(model.loglik, d.K, CORRELATED))
    assert model.stage1_aic == pytest.approx(aic_value(model.stage1_loglik, d.K, INDEPENDENT))


def test_fit_deterministic(small):
    d, _, model = small
    again = fit(d, FitConfig(kernel="exponential"))
    assert dumps_model(again) == dumps_model(model)


def test_zero_slope_posterior_uninformative():
    rng = np.random.default_rng(3)
    d = random_dataset(rng, n=4, K=2)
    theta = ModelParams([0.0, 0.0], [1.0, 1.0], [0.0, 0.0], [0.0, 0.0, 0.0], NoiseCov.independent([1.0, 1.0]))
    assert not _informative(e_step(d, theta), theta)


def test_predict_reproduces_fit(small):
    d, _, model = small
    for i in range(d.n):
        rows = d.rows_of(i)
        p = predict_ps(model, d.ages[rows], d.Y[rows])
        assert np.allclose(p.s, model.scores[rows], rtol=1e-10, atol=1e-10)
        assert np.allclose(p.u_hat, model.posteriors.u_hat[i], rtol=1e-10, atol=1e-12)


def test_predict_zero_slope_returns_prior_mean(small):
    _, _, model = small
    th = model.theta.with_(a=np.zeros(model.theta.K))
    p = predict_ps(replace(model, theta=th), [70.0, 71.5], np.ones((2, th.K)))
    assert np.allclose(p.u_hat, th.m)
    assert np.allclose(p.s, [70 * th.m[0] + th.m[1], 71.5 * th.m[0] + th.m[1]])


def test_predict_rejects_wrong_k(small):
    _, _, model = small
    with pytest.raises(DataError, match="K="):
        predict_ps(model, [70.0], np.ones((1, model.theta.K + 1)))


def test_predict_traj_examples():
    th = ModelParams([1.0, 2.0], [0.0, 1.0], [0, 0], [0, 0, 0], NoiseCov.independent([1.0, 1.0]))
    assert predict_traj(th, 2.0).tolist() == [2.0, 5.0]
    assert predict_traj(th, [0.0, 1.0]).tolist() == [[0.0, 1.0], [1.0, 3.0]]


def test_serialization_round_trip(small):
    d, _, model = small
    text = dumps_model(model)
    back = loads_model(text)
    assert dumps_model(back) == text
    assert back.rho == model.rho and back.family is model.family
    assert np.array_equal(back.lambda_hat, model.lambda_hat)
    rows = d.rows_of(0)
    assert np.array_equal(predict_ps(back, d.ages[rows], d.Y[rows]).s,
                          predict_ps(model, d.ages[rows], d.Y[rows]).s)


def test_unsupported_model_version(small):
    d = json.loads(dumps_model(small[2]))
    d["version"] = 99
    with pytest.raises(DataError, match="version"):
        loads_model(json.dumps(d))


def test_identical_ages_rejected():
    d, _ = simulate(SimDesign(seed=4, **{**SMALL, "max_visits": 1, "baseline_age_min": 70.0,
                                          "baseline_age_max": 70.0}))
    with pytest.raises(DataError, match="identical"):
        fit(d, FitConfig(stages=1))


def test_auto_records_candidates():
    d, _ = simulate(SimDesign(seed=5, **{**SMALL, "n": 25}))
    model = fit(d, FitConfig(kernel="auto"))
    assert set(model.candidate_logliks) == {"exponential", "gaussian", "rational_quadratic", "spherical"}
    assert model.loglik == max(model.candidate_logliks.values())
    assert model.loglik > model.stage1_loglik
