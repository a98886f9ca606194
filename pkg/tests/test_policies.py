import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from contcrm.embeddings import ContextMap, JointEmbedding, fit_nystrom
from contcrm.policies import (
    LoggingDescription,
    MeanModel,
    PolicyModel,
    constant_policy,
    init_near_logging,
    lognormal_params,
    softplus,
    softplus_inv,
)

from conftest import make_joint
from helpers import central_difference, random_config


def test_softplus_inverse():
    y = np.array([1e-6, 0.1, 1.0, 5.0, 50.0])
    np.testing.assert_allclose(softplus(softplus_inv(y)), y, rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.05, 50.0), st.floats(0.01, 20.0))
def test_lognormal_moment_map(mean, std):
    m, s = lognormal_params(mean, std)
    dist = stats.lognorm(s=s, scale=math.exp(m))
    assert dist.mean() == pytest.approx(mean, rel=1e-10)
    assert dist.std() == pytest.approx(std, rel=1e-8)


@pytest.mark.parametrize("family", ["normal", "lognormal"])
def test_density_matches_scipy(family, rng):
    pm = constant_policy(family, 2.0, 0.7)
    a = rng.uniform(0.1, 5.0, 50)
    X = np.zeros((50, 1))
    if family == "normal":
        oracle = stats.norm(2.0, 0.7).logpdf(a)
    else:
        m, s = lognormal_params(2.0, 0.7)
        oracle = stats.lognorm(s=s, scale=math.exp(m)).logpdf(a)
    np.testing.assert_allclose(pm.log_density(X, a), oracle, rtol=1e-12)


def test_lognormal_density_is_zero_for_nonpositive_actions():
    pm = constant_policy("lognormal", 1.0, 0.5)
    out = pm.log_density(np.zeros((2, 1)), np.array([0.0, -1.0]))
    assert np.all(out == -np.inf)


@pytest.mark.parametrize("family", ["normal", "lognormal"])
def test_density_integrates_to_one(family):
    pm = constant_policy(family, 1.5, 0.4)
    val, _ = integrate.quad(lambda a: pm.density(np.zeros((1, 1)), np.array([a]))[0], -10, 20, limit=200)
    assert val == pytest.approx(1.0, abs=1e-8)


@pytest.mark.parametrize("family", ["normal", "lognormal"])
def test_entropy_matches_scipy(family):
    pm = constant_policy(family, 2.5, 0.8)
    H = pm.entropy(np.zeros((1, 1)))[0]
    if family == "normal":
        oracle = stats.norm(2.5, 0.8).entropy()
    else:
        m, s = lognormal_params(2.5, 0.8)
        oracle = stats.lognorm(s=s, scale=math.exp(m)).entropy()
    assert H == pytest.approx(float(oracle), rel=1e-12)


@pytest.mark.parametrize("family", ["normal", "lognormal"])
def test_sampling_moments(family):
    pm = constant_policy(family, 3.0, 0.6, d=2)
    draws = pm.sample(np.zeros((4, 2)), np.random.default_rng(1), size=50_000)
    assert draws.shape == (4, 50_000)
    se = 0.6 / math.sqrt(50_000)
    assert abs(draws.mean() - 3.0) < 4 * se / 2
    assert draws.std() == pytest.approx(0.6, rel=0.01)


@pytest.mark.parametrize("kind", ["constant", "linear", "poly", "ccp"])
@pytest.mark.parametrize("family", ["normal", "lognormal"])
def test_score_matches_finite_differences(kind, family):
    rng = np.random.default_rng(7)
    pm, ds, _ = random_config(rng, "ips", family, kind, n=6)
    S = pm.score(ds.contexts, ds.actions)
    for i in range(ds.n):
        f = lambda th: pm.with_theta(th).log_density(ds.contexts[i : i + 1], ds.actions[i : i + 1])[0]
        np.testing.assert_allclose(S[i], central_difference(f, pm.theta), rtol=1e-5, atol=1e-7)


@pytest.mark.parametrize("kind", ["constant", "linear", "poly", "ccp"])
def test_mean_vjp_matches_jacobian(kind, rng):
    pm, ds, _ = random_config(rng, "ips", "normal", kind, n=7)
    mm = pm.mean_model
    u = rng.normal(size=ds.n)
    _, cache = mm.forward(ds.contexts)
    np.testing.assert_allclose(mm.vjp(cache, u), mm.jacobian(ds.contexts).T @ u, rtol=1e-10, atol=1e-12)


def test_poly_matches_quadratic_form(rng):
    B = rng.normal(size=(3, 3))
    mm = MeanModel("poly", 3, np.r_[B.ravel(), 0.5])
    X = rng.normal(size=(4, 3))
    np.testing.assert_allclose(mm.value(X), [x @ B @ x + 0.5 for x in X])
    with pytest.raises(ValueError):
        MeanModel("poly", 17, np.zeros(17 * 17 + 1))


@settings(max_examples=40, deadline=None)
@given(st.floats(-50, 50), st.floats(0.1, 100.0), st.integers(0, 1000))
def test_ccp_mean_stays_in_anchor_hull(scale, gamma, seed):
    r = np.random.default_rng(seed)
    je = make_joint(np.array([0.5, 4.0]), m=4)
    mm = MeanModel("ccp", 2, scale * r.normal(size=je.p), gamma=gamma, embedding=je)
    mu = mm.value(r.normal(size=(20, 2)) * 3)
    anchors = mm.anchors
    assert np.all(mu >= anchors.min() - 1e-12) and np.all(mu <= anchors.max() + 1e-12)


def test_ccp_large_gamma_is_argmin(rng):
    je = make_joint(np.array([1.0, 3.0]), m=3, d=1)
    mm = MeanModel("ccp", 1, rng.normal(size=je.p), gamma=1e4, embedding=je)
    X = rng.normal(size=(10, 1))
    phi_x = je.context_map(X)
    eta = phi_x @ mm.params.reshape(je.context_map.d_out, -1) @ je.anchor_features.T
    np.testing.assert_allclose(mm.value(X), mm.anchors[np.argmin(eta, axis=1)], atol=1e-8)


@pytest.mark.parametrize("family", ["normal", "lognormal"])
@pytest.mark.parametrize("kind", ["constant", "linear", "poly", "ccp"])
def test_init_near_logging_matches_mean(family, kind, rng):
    X = rng.normal(size=(30, 2))
    logging = LoggingDescription(1.5, 0.5)
    emb = make_joint(np.array([0.2, 4.0]), m=5, d=2) if kind == "ccp" else None
    pm = init_near_logging(logging, family, kind, 2, seed=0, noise=0.0, embedding=emb, gamma=10.0)
    np.testing.assert_allclose(pm.mean(X), 1.5, rtol=1e-6)
    assert pm.sigma == pytest.approx(0.5)


def test_serialization_roundtrip(rng):
    pm, ds, _ = random_config(rng, "ips", "lognormal", "ccp")
    back = PolicyModel.from_dict(pm.to_dict())
    np.testing.assert_array_equal(back.log_density(ds.contexts, ds.actions), pm.log_density(ds.contexts, ds.actions))


def test_with_theta_shape_check():
    pm = constant_policy("normal", 1.0, 1.0)
    with pytest.raises(ValueError):
        pm.with_theta(np.zeros(3))


def test_penalized_mask_excludes_offset_and_sigma():
    pm = PolicyModel("normal", MeanModel("linear", 2, np.zeros(3)), 0.0)
    assert pm.penalized_mask().tolist() == [True, True, False, False]
    je = JointEmbedding(ContextMap("linear", 1, True), fit_nystrom(np.array([0.0, 1.0]), 1.0))
    pm = PolicyModel("normal", MeanModel("ccp", 1, np.zeros(je.p), embedding=je), 0.0)
    assert pm.penalized_mask().tolist() == [True] * je.p + [False]
