"""Counterfactual risk estimators, their gradients and the direct method.

All estimators work on the cost scale (lower is better). The importance weight
of row ``i`` is ``w_i = pi(a_i | x_i) / pi0_i``; gradients are assembled as
``sum_i (dL/dw_i) * w_i * grad log pi(a_i | x_i)``, chained through the mean
model with a single vector-Jacobian product.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import kernels
from .data import LoggedDataset
from .embeddings import JointEmbedding, embed_joint
from .policies import MeanModel, PolicyModel

ESTIMATORS = ("ips", "cips", "scips", "snips", "dm", "sdm")


class InvalidEstimateError(ValueError):
    """The estimator is undefined on this data (e.g. all SNIPS weights are 0)."""


@dataclass(frozen=True)
class CrmObjective:
    """Estimator choice and regularization weights.

    ``M`` is the clipping threshold (cips, scips), ``lambda_var`` weights the
    empirical variance penalty, ``lambda_ent`` rewards policy entropy and
    ``C_reg`` is an l2 penalty on the mean-model parameters. The ``dm`` and
    ``sdm`` kinds evaluate a fitted cost predictor and are not trainable here.
    """

    estimator: str = "scips"
    M: float = 10.0
    lambda_var: float = 0.0
    lambda_ent: float = 1e-3
    C_reg: float = 0.0
    predictor: Optional["CostPredictor"] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if not self.M >= 1:
            raise ValueError("M must be at least 1")
        for name in ("lambda_var", "lambda_ent", "C_reg"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.estimator in ("dm", "sdm") and self.predictor is None:
            raise ValueError(f"estimator {self.estimator} needs a cost predictor")

    def to_dict(self) -> dict:
        return {
            "estimator": self.estimator,
            "M": self.M,
            "lambda_var": self.lambda_var,
            "lambda_ent": self.lambda_ent,
            "C_reg": self.C_reg,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CrmObjective":
        keys = ("estimator", "M", "lambda_var", "lambda_ent", "C_reg")
        return cls(**{k: d[k] for k in keys if k in d})


@dataclass(frozen=True, eq=False)
class WeightStats:
    weights: np.ndarray
    mean_weight: float
    ess: float
    ess_ratio: float

    @classmethod
    def from_weights(cls, w) -> "WeightStats":
        w = np.asarray(w, dtype=np.float64)
        n = w.shape[0]
        top = float(w.max()) if n else 0.0
        # ESS is scale free; rescaling keeps sum(w^2) from underflowing
        scale = top if top > 0 else 1.0
        s1, s2, _ = kernels.weight_moments(w / scale, np.zeros_like(w))
        ess = s1 * s1 / s2 if s2 > 0 else 0.0
        return cls(w, s1 * scale / n, ess, ess / n)


def ess_of(w) -> float:
    """Effective sample size ``(sum w)^2 / sum w^2``."""
    return WeightStats.from_weights(w).ess


def _weights_from_logp(logp, ds: LoggedDataset) -> np.ndarray:
    with np.errstate(over="ignore"):
        w = np.exp(logp) / ds.propensities
    bad = np.flatnonzero(~np.isfinite(w))
    if bad.size:
        i = int(bad[0])
        raise FloatingPointError(
            f"non-finite importance weight at row {i} (log-density {logp[i]!r}, "
            f"propensity {ds.propensities[i]!r})"
        )
    return w


def importance_weights(pm: PolicyModel, ds: LoggedDataset) -> WeightStats:
    return WeightStats.from_weights(_weights_from_logp(pm.log_density(ds.contexts, ds.actions), ds))


# ---------------------------------------------------------------------------
# soft clipping
# ---------------------------------------------------------------------------


def solve_alpha(M: float) -> float:
    """Root of ``alpha * log(alpha) = M`` for ``M >= 1``.

    Newton's method from ``max(M, e)``; the function is convex and increasing
    on ``alpha > 1`` so the iterates decrease monotonically to the root. A
    bracket ``[1, max(M, e)]`` guards every step.
    """
    if not M >= 1:
        raise ValueError(f"M must be at least 1, got {M}")
    lo, hi = 1.0, max(M, math.e)
    alpha = hi
    for _ in range(100):
        f = alpha * math.log(alpha) - M
        if f == 0.0:
            break
        if f > 0:
            hi = alpha
        else:
            lo = alpha
        step = f / (math.log(alpha) + 1.0)
        nxt = alpha - step
        if not lo <= nxt <= hi:
            nxt = 0.5 * (lo + hi)
        if abs(nxt - alpha) <= 1e-15 * alpha:
            alpha = nxt
            break
        alpha = nxt
    return alpha


def soft_clip(w, M: float):
    """Soft clip ``zeta(w, M)`` and its derivative.

    ``zeta`` is the identity up to ``M`` and ``alpha * log(w + alpha - M)``
    beyond, with ``alpha log alpha = M`` making value and slope continuous.
    Scalars in, scalars out; arrays in, arrays out.
    """
    alpha = solve_alpha(M)
    scalar = np.ndim(w) == 0
    value, deriv = kernels.soft_clip(w, M, alpha)
    if scalar:
        return float(value[0]), float(deriv[0])
    return value, deriv


# ---------------------------------------------------------------------------
# estimates
# ---------------------------------------------------------------------------


def _row_terms(y, w, objective: CrmObjective):
    """Per-row terms and their derivatives with respect to ``w``."""
    kind = objective.estimator
    if kind in ("ips", "snips"):
        return y * w, y.copy()
    if kind == "cips":
        keep = w <= objective.M
        return y * np.minimum(w, objective.M), np.where(keep, y, 0.0)
    if kind == "scips":
        z, dz = kernels.soft_clip(w, objective.M, solve_alpha(objective.M))
        return y * z, y * dz
    raise ValueError(f"no importance-weighted terms for {kind}")


def _estimate_from_weights(y, w, objective: CrmObjective):
    """Estimator value and ``dL/dw`` for the importance-weighted kinds."""
    n = y.shape[0]
    if objective.estimator == "snips":
        s1, _, sy = kernels.weight_moments(w, y)
        if not s1 > 0:
            raise InvalidEstimateError("SNIPS undefined: all importance weights are zero")
        value = sy / s1
        return value, (y - value) / s1
    terms, dterms = _row_terms(y, w, objective)
    return float(terms.mean()), dterms / n


def estimate(pm: PolicyModel, ds: LoggedDataset, objective: CrmObjective) -> float:
    """Value of the objective's estimator for ``pm`` on ``ds``."""
    if objective.estimator == "dm":
        return float(objective.predictor.predict(ds.contexts, pm.mean(ds.contexts)).mean())
    if objective.estimator == "sdm":
        return float(expected_predicted_cost(objective.predictor, pm, ds.contexts).mean())
    w = importance_weights(pm, ds).weights
    return float(_estimate_from_weights(ds.costs, w, objective)[0])


def sample_variance(terms) -> float:
    terms = np.asarray(terms, dtype=np.float64)
    n = terms.shape[0]
    if n < 2:
        raise ValueError("variance needs at least two rows")
    return float(((terms - terms.mean()) ** 2).sum() / (n - 1))


def variance_penalty(pm: PolicyModel, ds: LoggedDataset, objective: CrmObjective) -> float:
    """Unbiased sample variance of the per-row estimator terms."""
    w = importance_weights(pm, ds).weights
    terms, _ = _row_terms(ds.costs, w, objective)
    return sample_variance(terms)


def objective_value_grad(pm: PolicyModel, ds: LoggedDataset, objective: CrmObjective):
    """Full training objective and its gradient with respect to ``pm.theta``.

    ``estimate + lambda_var * V + C_reg * |mean params|^2 - lambda_ent * mean
    entropy``. Hard-clipped rows (``w > M``) contribute a zero subgradient.
    """
    if objective.estimator in ("dm", "sdm"):
        raise ValueError("direct-method objectives are evaluated, not trained; see dm_policy")
    y = ds.costs
    n = ds.n
    parts = pm.density_parts(ds.contexts, ds.actions)
    w = _weights_from_logp(parts.logp, ds)
    value, g = _estimate_from_weights(y, w, objective)

    if objective.lambda_var > 0:
        if n < 2:
            raise ValueError("variance penalty needs at least two rows")
        terms, dterms = _row_terms(y, w, objective)
        centered = terms - terms.mean()
        value += objective.lambda_var * float((centered**2).sum() / (n - 1))
        g = g + objective.lambda_var * 2.0 * centered / (n - 1) * dterms

    # chain dL/dw through w_i = exp(logp_i) / pi0_i
    gw = g * w
    u_mean = gw * parts.dlogp_dmean
    g_sigma = float(gw @ parts.dlogp_dsigma_raw)

    if objective.lambda_ent > 0:
        H, dH_dmean, dH_dls, _ = pm.entropy_parts(ds.contexts)
        value -= objective.lambda_ent * float(H.mean())
        u_mean = u_mean - objective.lambda_ent * dH_dmean / n
        g_sigma -= objective.lambda_ent * float(dH_dls.mean())

    grad = np.empty(pm.n_params)
    grad[:-1] = pm.mean_model.vjp(parts.cache, u_mean)
    grad[-1] = g_sigma

    if objective.C_reg > 0:
        mask = pm.penalized_mask()
        theta = pm.theta
        value += objective.C_reg * float((theta[mask] ** 2).sum())
        grad[mask] += 2.0 * objective.C_reg * theta[mask]
    return float(value), grad


# ---------------------------------------------------------------------------
# direct method
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CostPredictor:
    """Ridge regression of costs on the joint embedding ``psi(x, a)``."""

    beta: np.ndarray
    embedding: JointEmbedding
    C: float

    def predict(self, X, a) -> np.ndarray:
        return embed_joint(self.embedding, np.atleast_2d(X), np.asarray(a).reshape(-1)) @ self.beta

    def predict_grid(self, X, grid) -> np.ndarray:
        """Predicted cost for every context (rows) and grid action (columns)."""
        from .embeddings import embed_action

        phi_x = self.embedding.context_map(np.atleast_2d(X))
        phi_a = np.atleast_2d(embed_action(self.embedding.action_embed, np.asarray(grid)))
        B = self.beta.reshape(self.embedding.context_map.d_out, -1)
        return phi_x @ B @ phi_a.T

    def greedy_actions(self, X) -> np.ndarray:
        """Anchor with the smallest predicted cost; ties go to the smaller anchor."""
        anchors = np.asarray(self.embedding.action_embed.anchors, dtype=np.float64)
        order = np.argsort(anchors, kind="stable")
        pred = self.predict_grid(X, anchors[order])
        return anchors[order][np.argmin(pred, axis=1)]

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "embedding": self.embedding.to_dict(), "C": self.C}

    @classmethod
    def from_dict(cls, d: dict) -> "CostPredictor":
        return cls(np.asarray(d["beta"], dtype=np.float64), JointEmbedding.from_dict(d["embedding"]), float(d["C"]))


def fit_cost_predictor(ds: LoggedDataset, embedding: JointEmbedding, C: float) -> CostPredictor:
    """Solve ``min |y - Psi beta|^2 + C |beta|^2`` by the normal equations."""
    Psi = embed_joint(embedding, ds.contexts, ds.actions)
    p = Psi.shape[1]
    if ds.n < p:
        warnings.warn(f"ridge fit with fewer rows ({ds.n}) than features ({p})", RuntimeWarning, stacklevel=2)
    A = Psi.T @ Psi
    jitter = 1e-10 * np.trace(A) / p
    A[np.diag_indices_from(A)] += C + jitter
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("normal equations are singular even after jitter") from exc
    beta = np.linalg.solve(L.T, np.linalg.solve(L, Psi.T @ ds.costs))
    if not np.all(np.isfinite(beta)):
        raise np.linalg.LinAlgError("ridge solution is not finite")
    return CostPredictor(beta, embedding, float(C))


def dm_policy(cp: CostPredictor, sigma_dm: Optional[float] = None, family: str = "normal") -> PolicyModel:
    """Greedy direct-method policy, optionally smoothed with Gaussian noise.

    With ``sigma_dm=None`` the returned policy is numerically deterministic
    (``sigma = 1e-8``); otherwise it is ``N(greedy(x), sigma_dm^2)``.
    """
    d = cp.embedding.context_map.d_in
    mm = MeanModel("greedy", d, np.zeros(0), predictor=cp)
    sigma = 1e-8 if sigma_dm is None else sigma_dm
    return PolicyModel(family, mm, math.log(sigma))


def expected_predicted_cost(cp: CostPredictor, pm: PolicyModel, X, n_nodes: int = 32) -> np.ndarray:
    """``E_{a ~ pi(.|x)} eta_hat(x, a)`` per context by Gauss-Hermite quadrature."""
    nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)
    weights = weights / weights.sum()
    X = np.atleast_2d(X)
    mu = pm.mean(X)
    if pm.family == "normal":
        acts = mu[:, None] + pm.sigma * nodes[None, :]
    else:
        from .policies import lognormal_params

        m, s = lognormal_params(mu, pm.sigma)
        acts = np.exp(m[:, None] + s[:, None] * nodes[None, :])
    n, k = acts.shape
    pred = cp.predict(np.repeat(X, k, axis=0), acts.reshape(-1)).reshape(n, k)
    return pred @ weights


def with_estimator(objective: CrmObjective, **changes) -> CrmObjective:
    return replace(objective, **changes)
