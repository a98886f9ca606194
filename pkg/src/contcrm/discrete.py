"""Naive discretization baseline: a softmax policy over action buckets.

The logged action range is cut into ``m`` equal-width buckets; the policy
chooses a bucket with a linear-softmax model on the contexts and plays its
center. It is trained with the discrete IPS estimator, using the empirical
bucket frequencies of the logged actions as the logging probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, softmax

from .data import LoggedDataset
from .optim import LbfgsConfig, minimize


@dataclass(frozen=True, eq=False)
class BucketPolicy:
    edges: np.ndarray
    weights: np.ndarray  # (d + 1, m): linear logits with an intercept row

    @property
    def m(self) -> int:
        return self.edges.shape[0] - 1

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def probabilities(self, X) -> np.ndarray:
        return softmax(_features(X) @ self.weights, axis=1)

    def sample(self, X, rng, size=None) -> np.ndarray:
        """Bucket centers drawn from the per-context bucket distribution."""
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        P = self.probabilities(X)
        k = 1 if size is None else size
        cum = np.cumsum(P, axis=1)
        u = rng.random((P.shape[0], k))
        idx = (u[:, :, None] > cum[:, None, :]).sum(axis=2)
        idx = np.minimum(idx, self.m - 1)
        acts = self.centers[idx]
        return acts[:, 0] if size is None else acts


def _features(X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return np.column_stack([X, np.ones(X.shape[0])])


def bucketize(actions, edges) -> np.ndarray:
    idx = np.searchsorted(edges, actions, side="right") - 1
    return np.clip(idx, 0, edges.shape[0] - 2)


def fit_bucket_policy(
    ds: LoggedDataset,
    m: int,
    C: float = 1e-4,
    M: float = np.inf,
    inner: LbfgsConfig = LbfgsConfig(max_iter=500),
) -> BucketPolicy:
    """Fit the bucket policy by minimizing discrete (optionally clipped) IPS.

    The objective is ``mean(y_i * min(P(b_i | x_i) / P0(b_i), M)) + C |W|^2``
    with the intercept row left unpenalized.
    """
    if m < 1:
        raise ValueError("need at least one bucket")
    edges = np.linspace(ds.actions.min(), ds.actions.max(), m + 1)
    b = bucketize(ds.actions, edges)
    p0 = np.bincount(b, minlength=m) / ds.n
    F = _features(ds.contexts)
    n, k = F.shape
    y = ds.costs
    pen = np.ones((k, m))
    pen[-1] = 0.0
    rows = np.arange(n)

    def fun(theta):
        W = theta.reshape(k, m)
        logP = log_softmax(F @ W, axis=1)
        P = np.exp(logP)
        w = P[rows, b] / p0[b]
        keep = w <= M
        val = float(np.mean(y * np.minimum(w, M))) + C * float((pen * W * W).sum())
        # d w_i / d logits_ij = w_i * (1[j = b_i] - P_ij)
        g_row = np.where(keep, y * w, 0.0) / n
        G = -P * g_row[:, None]
        G[rows, b] += g_row
        grad = F.T @ G + 2.0 * C * pen * W
        return val, grad.reshape(-1)

    res = minimize(fun, np.zeros(k * m), inner)
    return BucketPolicy(edges, res.x.reshape(k, m))
