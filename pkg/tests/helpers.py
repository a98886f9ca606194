"""Shared test utilities: random policy configurations and finite differences."""

import numpy as np

from contcrm.data import LoggedDataset
from contcrm.embeddings import ContextMap, JointEmbedding, fit_nystrom, median_bandwidth, select_anchors
from contcrm.estimators import CrmObjective, objective_value_grad
from contcrm.policies import MEAN_KINDS, MeanModel, PolicyModel

ESTIMATORS = ("ips", "cips", "scips", "snips")
FAMILIES = ("normal", "lognormal")


def random_config(rng, estimator, family, kind, n=40, d=2):
    """A random dataset, policy and objective of the requested type."""
    X = rng.normal(size=(n, d))
    a = np.exp(0.6 + 0.3 * rng.normal(size=n))
    ds = LoggedDataset(X, a, 0.5 * np.exp(0.3 * rng.normal(size=n)), rng.normal(size=n))
    emb = None
    if kind == "ccp":
        anchors = select_anchors(a, 4, "quantile")
        emb = JointEmbedding(ContextMap("linear", d, True), fit_nystrom(anchors, median_bandwidth(a)))
    k = MeanModel.param_count(kind, d, emb)
    params = 0.1 * rng.normal(size=k)
    if kind != "ccp":
        params[-1] += 1.8
    pm = PolicyModel(family, MeanModel(kind, d, params, gamma=3.0, embedding=emb), np.log(0.4) + 0.1 * rng.normal())
    obj = CrmObjective(estimator, M=float(rng.uniform(1, 5)), lambda_var=0.1, lambda_ent=0.01, C_reg=0.01)
    return pm, ds, obj


def central_difference(f, theta, h=1e-5):
    out = np.zeros_like(theta)
    for j in range(theta.shape[0]):
        e = np.zeros_like(theta)
        e[j] = h
        out[j] = (f(theta + e) - f(theta - e)) / (2 * h)
    return out


def gradient_error(pm, ds, obj) -> float:
    """Relative error of the analytic gradient against central differences."""
    _, g = objective_value_grad(pm, ds, obj)
    fd = central_difference(lambda th: objective_value_grad(pm.with_theta(th), ds, obj)[0], pm.theta)
    return float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-8))


def gradient_sweep(n_configs=100, seed=0):
    """Cycle through every (estimator, family, mean kind) combination."""
    rng = np.random.default_rng(seed)
    results = []
    for t in range(n_configs):
        est = ESTIMATORS[t % 4]
        fam = FAMILIES[(t // 4) % 2]
        kind = MEAN_KINDS[(t // 8) % len(MEAN_KINDS)]
        pm, ds, obj = random_config(rng, est, fam, kind)
        results.append((est, fam, kind, gradient_error(pm, ds, obj)))
    return results
