import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contcrm.data import LoggedDataset
from contcrm.estimators import CrmObjective
from contcrm.learn import Candidate, ModelConfig
from contcrm.optim import LbfgsConfig, ProxConfig
from contcrm.policies import constant_policy
from contcrm.protocol import (
    NoEligibleCandidateError,
    ProtocolScenario,
    WhatIfSetup,
    bootstrap_snips,
    bootstrap_weighted,
    confusion,
    cross_validate,
    ess_sweep,
    evaluate_protocol,
    has_interior_maximum,
    quadrature_risk,
    resample_indices,
    validate_protocol_experiment,
    whatif_diagnostics,
)

from conftest import make_dataset


def test_bootstrap_matches_manual_loop(rng):
    y = rng.normal(size=40)
    w = rng.exponential(size=40)
    res = bootstrap_weighted(y, w, n_boot=30, seed=5)
    idx = resample_indices(40, 30, 5)
    manual = np.array([np.sum(y[i] * w[i]) / np.sum(w[i]) for i in idx])
    np.testing.assert_allclose(np.sort(res.estimates), np.sort(manual), rtol=1e-12)
    assert res.upper_one_sided == pytest.approx(np.quantile(manual, 0.95))
    assert res.lower <= res.upper


def test_bootstrap_all_zero_weights_is_invalid():
    res = bootstrap_weighted(np.ones(10), np.zeros(10), n_boot=20, seed=0)
    assert res.n_skipped == 20 and not res.valid and np.isnan(res.upper)


def test_bootstrap_snips_warns_on_tiny_data():
    ds = make_dataset(n=10)
    with pytest.warns(RuntimeWarning):
        bootstrap_snips(constant_policy("normal", 1.5, 0.5, d=2), ds, n_boot=10)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.5))
def test_invalid_reports_never_reject(seed, nu):
    r = np.random.default_rng(seed)
    wv = r.exponential(size=30) ** r.uniform(1, 8)
    wt = r.exponential(size=30) ** r.uniform(1, 8)
    ds = LoggedDataset(np.zeros((30, 1)), np.zeros(30), np.ones(30), r.normal(size=30) - 5)
    rep = evaluate_protocol((wv, wt), ds, ds, nu=nu, n_boot=50, seed=seed)
    if not rep.valid:
        assert not rep.reject_H0
    assert rep.valid == (rep.ess_ratio > nu and rep.ess_ratio_test > nu and rep.n_skipped <= 25)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-100, 100))
def test_decision_is_shift_invariant(seed, c):
    ds = make_dataset(n=80, seed=seed)
    pm = constant_policy("normal", 1.2, 0.5, d=2)
    ref = float(ds.costs.mean()) - 0.05
    a = evaluate_protocol(pm, ds, ds, logging_risk_estimate=ref, n_boot=50, seed=1)
    b = evaluate_protocol(pm, ds, ds.with_costs(ds.costs + c), logging_risk_estimate=ref + c, n_boot=50, seed=1)
    if abs(a.upper_bound - ref) > 1e-9 * (1 + abs(c)):
        assert a.reject_H0 == b.reject_H0
    assert b.snips_estimate - c == pytest.approx(a.snips_estimate, abs=1e-9 * (1 + abs(c)))


def test_clearly_better_policy_is_accepted():
    # costs are lowest near a = 1; logging is N(1.5, 0.5^2)
    r = np.random.default_rng(0)
    n = 2000
    a = 1.5 + 0.5 * r.standard_normal(n)
    prop = np.exp(-0.5 * ((a - 1.5) / 0.5) ** 2) / (0.5 * np.sqrt(2 * np.pi))
    ds = LoggedDataset(np.zeros((n, 1)), a, prop, (a - 1.0) ** 2)
    rep = evaluate_protocol(constant_policy("normal", 1.0, 0.4), ds, ds, n_boot=100, seed=0)
    assert rep.valid and rep.reject_H0
    assert rep.snips_estimate < rep.logging_risk_estimate
    rep = evaluate_protocol(constant_policy("normal", 2.5, 0.4), ds, ds, n_boot=100, seed=0)
    assert not rep.reject_H0
    d = rep.to_dict()
    assert d["snips_reward"] == pytest.approx(-rep.snips_estimate)


def test_far_policy_fails_ess():
    ds = make_dataset(n=300)
    rep = evaluate_protocol(constant_policy("normal", 6.0, 0.1, d=2), ds, ds, nu=0.01, n_boot=20)
    assert not rep.valid and not rep.reject_H0 and "ESS" in rep.reason


def test_on_policy_rejection_rate_is_small():
    rejections = 0
    for seed in range(40):
        dv, dt = make_dataset(n=200, seed=2 * seed), make_dataset(n=200, seed=2 * seed + 1)
        pm = constant_policy("normal", 1.5, 0.5, d=2)
        rejections += evaluate_protocol(pm, dv, dt, n_boot=100, seed=seed).reject_H0
    # identical policies: the one-sided bootstrap upper bound sits above the mean
    assert rejections <= 4


def _cands(Ms=(2.0, 5.0), estimator="scips"):
    model = ModelConfig(family="normal", mean_kind="constant")
    prox = ProxConfig(kappa=0.0, outer_iters=1, inner=LbfgsConfig(max_iter=30))
    return [Candidate(model, CrmObjective(estimator, M=M, lambda_ent=0.0), prox) for M in Ms]


def test_cross_validation_is_deterministic():
    ds = make_dataset(n=150, seed=4)
    a = cross_validate(_cands(), ds, k_folds=3, seed=2)
    b = cross_validate(_cands(), ds, k_folds=3, seed=2)
    assert a.best_index == b.best_index
    np.testing.assert_array_equal(a.scores, b.scores)
    assert len(a.folds) == 6
    for f in a.folds:
        assert f.kept == (f.ess_ratio > 0.01)


def test_cross_validation_discards_per_fold():
    ds = make_dataset(n=150, seed=4)
    cv = cross_validate(_cands(), ds, k_folds=3, seed=2, nu=0.0)
    kept_means = [np.mean([f.snips for f in cv.folds if f.candidate == c]) for c in range(2)]
    np.testing.assert_allclose(cv.scores, kept_means)
    with pytest.raises(NoEligibleCandidateError, match="closer to the logging"):
        cross_validate(_cands(), ds, k_folds=3, seed=2, nu=1.0)


def test_cross_validation_ties_prefer_smaller_M():
    ds = make_dataset(n=90, seed=1)
    # SNIPS ignores M, so both candidates train and score identically
    cv = cross_validate(_cands((50.0, 20.0), "snips"), ds, k_folds=3, seed=0)
    assert cv.scores[0] == cv.scores[1]
    assert cv.best_index == 1


def test_confusion_counts():
    c = confusion([True, True, False, False], [True, False, True, False])
    assert (c.tp, c.fp, c.fn, c.tn) == (1, 1, 1, 1)
    assert c.precision == 0.5 and c.recall == 0.5 and c.f1 == 0.5


def test_interior_maximum_helper():
    assert has_interior_maximum([0.1, 0.5, 0.2])
    assert not has_interior_maximum([0.5, 0.4, 0.1])
    assert not has_interior_maximum([0.1, 0.2])


def test_quadrature_risk_of_logging():
    sc = ProtocolScenario()
    pm = sc.logging_policy()
    a = pm.sample(np.zeros((200_000, 1)), np.random.default_rng(0))
    mc = np.mean(sc.cost_offset - sc.reward(a))
    assert quadrature_risk(pm, sc) == pytest.approx(mc, abs=3e-3)


def test_validation_experiment_small():
    s = validate_protocol_experiment("ii", n_policies=60, seed=3)
    c = s.counts("snips")
    assert c.tp + c.fp + c.fn + c.tn == 60
    par = validate_protocol_experiment("ii", n_policies=60, seed=3, jobs=2)
    np.testing.assert_array_equal(s.raw_reject["snips"], par.raw_reject["snips"])
    sweep = ess_sweep(s, nus=(0.0, 0.5, 1.0))
    assert sweep[-1]["tp"] == 0 and sweep[-1]["fp"] == 0
    assert len(s.records()) == 60
    with pytest.raises(ValueError):
        validate_protocol_experiment("iii", 5)


def test_whatif_diagnostics_basic():
    setup = WhatIfSetup()
    rows = whatif_diagnostics([setup.mode, setup.mode + 2 * setup.std], n=5000, seed=1, n_boot=30)
    assert rows[0].ess_ratio > rows[1].ess_ratio
    assert abs(rows[0].mean_weight - 1.0) < 4 * rows[0].mean_weight_se
    assert rows[0].ci_width < rows[1].ci_width
    with pytest.raises(ValueError):
        whatif_diagnostics([], n=10)
