"""Stochastic continuous-action policies.

A policy is a distribution family (normal or lognormal) around a
context-dependent mean ``mu(x)`` with a global scale ``sigma = exp(sigma_raw)``.
The flat parameter vector ``theta`` is the mean-model parameters followed by
``sigma_raw``; everything the optimizer needs (log-density, score, entropy and
their gradients) is exposed in terms of ``theta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from . import kernels
from .embeddings import JointEmbedding

FAMILIES = ("normal", "lognormal")
MEAN_KINDS = ("constant", "linear", "poly", "ccp")
POLY_MAX_DIM = 16


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus inverse needs positive input")
    # log(exp(y) - 1) written to stay finite for large y
    return y + np.log(-np.expm1(-y))


def lognormal_params(mean, std):
    """Moment map from (mean, std) to the underlying normal's (m, s)."""
    mean = np.asarray(mean, dtype=np.float64)
    s2 = np.log1p((np.asarray(std, dtype=np.float64) / mean) ** 2)
    return np.log(mean) - 0.5 * s2, np.sqrt(s2)


def _as_contexts(X, d: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1) if X.shape[0] == d else X.reshape(-1, 1)
    if X.shape[1] != d:
        raise ValueError(f"contexts have dimension {X.shape[1]}, model expects {d}")
    return X


@dataclass(frozen=True, eq=False)
class MeanModel:
    """Context-dependent mean ``mu(x)`` with a flat parameter vector.

    Parameter layouts: ``constant`` is ``[b]``; ``linear`` is ``[beta (d), b]``;
    ``poly`` is ``[B (d*d, row-major), b]`` for ``x^T B x + b``; ``ccp`` is the
    row-major ``(d_out, m)`` matrix ``B`` with ``eta(x, a_j) = psi_X(x)^T B
    psi_A(a_j)`` and ``mu(x) = sum_j a_j softmax(-gamma * eta(x, .))_j``.
    The ``greedy`` kind has no parameters and plays the anchor minimizing a
    fitted cost predictor (the direct method).
    """

    kind: str
    d: int
    params: np.ndarray
    gamma: float = 1.0
    embedding: Optional[JointEmbedding] = None
    predictor: Optional[object] = None

    def __post_init__(self):
        if self.kind not in MEAN_KINDS + ("greedy",):
            raise ValueError(f"unknown mean model {self.kind!r}")
        if self.kind == "poly" and self.d > POLY_MAX_DIM:
            raise ValueError(f"poly mean model limited to d <= {POLY_MAX_DIM}")
        if self.kind == "ccp":
            if self.embedding is None:
                raise ValueError("ccp mean model needs a joint embedding")
            if self.embedding.context_map.d_in != self.d:
                raise ValueError("embedding context dimension does not match d")
            if not self.gamma > 0:
                raise ValueError("gamma must be positive")
        if self.kind == "greedy" and self.predictor is None:
            raise ValueError("greedy mean model needs a cost predictor")
        params = np.array(self.params, dtype=np.float64).reshape(-1)
        expected = self.param_count(self.kind, self.d, self.embedding)
        if params.shape[0] != expected:
            raise ValueError(f"{self.kind} mean model needs {expected} parameters, got {params.shape[0]}")
        params.setflags(write=False)
        object.__setattr__(self, "params", params)

    @staticmethod
    def param_count(kind: str, d: int, embedding: Optional[JointEmbedding] = None) -> int:
        if kind == "constant":
            return 1
        if kind == "linear":
            return d + 1
        if kind == "poly":
            return d * d + 1
        if kind == "ccp":
            return embedding.p
        if kind == "greedy":
            return 0
        raise ValueError(f"unknown mean model {kind!r}")

    @property
    def anchors(self) -> np.ndarray:
        return np.asarray(self.embedding.action_embed.anchors, dtype=np.float64)

    def with_params(self, params) -> "MeanModel":
        return replace(self, params=params)

    def penalized_mask(self) -> np.ndarray:
        """Which parameters the l2 penalty acts on (all but the offset ``b``)."""
        mask = np.ones(self.params.shape[0], dtype=bool)
        if self.kind in ("constant", "linear", "poly"):
            mask[-1] = False
        return mask

    # -- forward / backward -------------------------------------------------

    def forward(self, X):
        """Return ``(mu, cache)``; the cache feeds :meth:`vjp`."""
        X = _as_contexts(X, self.d)
        p = self.params
        if self.kind == "constant":
            return np.full(X.shape[0], p[0]), (X,)
        if self.kind == "linear":
            return X @ p[:-1] + p[-1], (X,)
        if self.kind == "poly":
            B = p[:-1].reshape(self.d, self.d)
            return np.einsum("ni,ij,nj->n", X, B, X) + p[-1], (X,)
        if self.kind == "ccp":
            phi_x = self.embedding.context_map(X)
            B = p.reshape(self.embedding.context_map.d_out, -1)
            eta = phi_x @ B @ self.embedding.anchor_features.T
            mu, P = kernels.ccp_forward(eta, self.anchors, self.gamma)
            return mu, (X, phi_x, P, mu)
        return self.predictor.greedy_actions(X), (X,)

    def value(self, X) -> np.ndarray:
        return self.forward(X)[0]

    def vjp(self, cache, upstream) -> np.ndarray:
        """Gradient of ``sum_i upstream_i * mu(x_i)`` with respect to params."""
        u = np.asarray(upstream, dtype=np.float64)
        X = cache[0]
        if self.kind == "constant":
            return np.array([u.sum()])
        if self.kind == "linear":
            return np.concatenate([X.T @ u, [u.sum()]])
        if self.kind == "poly":
            return np.concatenate([((X.T * u) @ X).reshape(-1), [u.sum()]])
        if self.kind == "ccp":
            _, phi_x, P, mu = cache
            deta = kernels.ccp_backward(P, self.anchors, mu, self.gamma, u)
            return (phi_x.T @ deta @ self.embedding.anchor_features).reshape(-1)
        return np.zeros(0)

    def jacobian(self, X) -> np.ndarray:
        """Dense ``(n, n_params)`` Jacobian of ``mu``; meant for small n."""
        mu, cache = self.forward(X)
        X = cache[0]
        n = X.shape[0]
        if self.kind == "constant":
            return np.ones((n, 1))
        if self.kind == "linear":
            return np.column_stack([X, np.ones(n)])
        if self.kind == "poly":
            return np.column_stack([(X[:, :, None] * X[:, None, :]).reshape(n, -1), np.ones(n)])
        if self.kind == "ccp":
            _, phi_x, P, _ = cache
            G = kernels.ccp_backward(P, self.anchors, mu, self.gamma, np.ones(n))
            GA = G @ self.embedding.anchor_features
            return (phi_x[:, :, None] * GA[:, None, :]).reshape(n, -1)
        return np.zeros((n, 0))

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "d": self.d, "params": self.params.tolist(), "gamma": self.gamma}
        if self.embedding is not None:
            out["embedding"] = self.embedding.to_dict()
        if self.predictor is not None:
            out["predictor"] = self.predictor.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MeanModel":
        emb = JointEmbedding.from_dict(d["embedding"]) if "embedding" in d else None
        predictor = None
        if "predictor" in d:
            from .estimators import CostPredictor

            predictor = CostPredictor.from_dict(d["predictor"])
        return cls(d["kind"], int(d["d"]), np.asarray(d["params"]), float(d.get("gamma", 1.0)), emb, predictor)


@dataclass(frozen=True)
class DensityParts:
    """Log-density of every row plus what the gradients need."""

    logp: np.ndarray
    dlogp_dmean: np.ndarray  # derivative w.r.t. the raw mean-model output
    dlogp_dsigma_raw: np.ndarray
    cache: tuple = field(repr=False)


@dataclass(frozen=True, eq=False)
class PolicyModel:
    family: str
    mean_model: MeanModel
    sigma_raw: float

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        object.__setattr__(self, "sigma_raw", float(self.sigma_raw))

    # -- parameters -----------------------------------------------------------

    @property
    def sigma(self) -> float:
        return math.exp(self.sigma_raw)

    @property
    def d(self) -> int:
        return self.mean_model.d

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([self.mean_model.params, [self.sigma_raw]])

    @property
    def n_params(self) -> int:
        return self.mean_model.params.shape[0] + 1

    def with_theta(self, theta) -> "PolicyModel":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(f"theta must have length {self.n_params}")
        return PolicyModel(self.family, self.mean_model.with_params(theta[:-1]), theta[-1])

    def penalized_mask(self) -> np.ndarray:
        return np.concatenate([self.mean_model.penalized_mask(), [False]])

    # -- distribution -------------------------------------------------------

    def _mean_raw(self, X):
        return self.mean_model.forward(X)

    def mean(self, X) -> np.ndarray:
        """Expected action ``E[a | x]`` (softplus of the raw mean for lognormal)."""
        raw, _ = self._mean_raw(X)
        return softplus(raw) if self.family == "lognormal" else raw

    def density_parts(self, X, a) -> DensityParts:
        raw, cache = self._mean_raw(X)
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        if a.shape[0] != raw.shape[0]:
            raise ValueError(f"{raw.shape[0]} contexts but {a.shape[0]} actions")
        if self.family == "normal":
            logp, dmu, dls = kernels.normal_logpdf_grad(a, raw, self.sigma)
            return DensityParts(logp, dmu, dls, cache)
        mu = softplus(raw)
        logp, dmu, dls = kernels.lognormal_logpdf_grad(a, mu, self.sigma)
        return DensityParts(logp, dmu * expit(raw), dls, cache)

    def log_density(self, X, a) -> np.ndarray:
        return self.density_parts(X, a).logp

    def density(self, X, a) -> np.ndarray:
        return np.exp(self.log_density(X, a))

    def score(self, X, a) -> np.ndarray:
        """``grad_theta log pi(a_i | x_i)`` as an ``(n, n_params)`` matrix."""
        parts = self.density_parts(X, a)
        J = self.mean_model.jacobian(X)
        return np.column_stack([J * parts.dlogp_dmean[:, None], parts.dlogp_dsigma_raw])

    def sample(self, X, rng, size: Optional[int] = None) -> np.ndarray:
        """Draw actions; shape ``(n,)`` or ``(n, size)`` when ``size`` is given."""
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        mu = self.mean(X)
        shape = mu.shape if size is None else (mu.shape[0], size)
        z = rng.standard_normal(shape)
        loc = mu if size is None else mu[:, None]
        if self.family == "normal":
            return loc + self.sigma * z
        m, s = lognormal_params(loc, self.sigma)
        return np.exp(m + s * z)

    def entropy_parts(self, X):
        """Differential entropy per row with partials (raw mean, sigma_raw)."""
        raw, cache = self._mean_raw(X)
        n = raw.shape[0]
        if self.family == "normal":
            H = np.full(n, 0.5 * math.log(2 * math.pi * math.e) + self.sigma_raw)
            return H, np.zeros(n), np.ones(n), cache
        mu = softplus(raw)
        r = (self.sigma / mu) ** 2
        s2 = np.log1p(r)
        ds2_dmu = -2.0 * r / (mu * (1.0 + r))
        ds2_dls = 2.0 * r / (1.0 + r)
        H = np.log(mu) - 0.5 * s2 + 0.5 * np.log(2 * math.pi * math.e * s2)
        dH_dmu = 1.0 / mu - 0.5 * ds2_dmu + 0.5 * ds2_dmu / s2
        dH_dls = -0.5 * ds2_dls + 0.5 * ds2_dls / s2
        return H, dH_dmu * expit(raw), dH_dls, cache

    def entropy(self, X) -> np.ndarray:
        return self.entropy_parts(X)[0]

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        mm = self.mean_model
        out = {
            "family": self.family,
            "mean_kind": mm.kind,
            "d": mm.d,
            "params": mm.params.tolist(),
            "sigma_raw": self.sigma_raw,
            "gamma": mm.gamma,
        }
        if mm.embedding is not None:
            out["embedding"] = mm.embedding.to_dict()
            out["anchors"] = np.asarray(mm.anchors).tolist()
        if mm.predictor is not None:
            out["predictor"] = mm.predictor.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyModel":
        mm = MeanModel.from_dict(
            {
                "kind": d["mean_kind"],
                "d": d["d"],
                "params": d["params"],
                "gamma": d.get("gamma", 1.0),
                **({"embedding": d["embedding"]} if "embedding" in d else {}),
                **({"predictor": d["predictor"]} if "predictor" in d else {}),
            }
        )
        return cls(d["family"], mm, float(d["sigma_raw"]))


@dataclass(frozen=True)
class LoggingDescription:
    """First two moments of a (context-free) logging action distribution."""

    mean: float
    std: float

    @classmethod
    def from_actions(cls, actions) -> "LoggingDescription":
        actions = np.asarray(actions, dtype=np.float64)
        return cls(float(actions.mean()), float(actions.std(ddof=1)))


def _tilt_intercept(embedding: JointEmbedding, gamma: float, target: float) -> np.ndarray:
    """Intercept row making the soft-argmin over anchors average to ``target``.

    The anchor scores are tilted linearly, ``eta_j = tau * a_j``, with ``tau``
    found by root finding; the row is then recovered through the anchor
    features. Targets outside the anchor hull are pulled just inside it.
    """
    anchors = np.asarray(embedding.action_embed.anchors, dtype=np.float64)
    lo, hi = anchors.min(), anchors.max()
    span = hi - lo
    target = float(np.clip(target, lo + 1e-3 * span, hi - 1e-3 * span))
    centered = (anchors - anchors.mean()) / span

    def soft_mean(tau):
        logits = -gamma * tau * centered
        w = np.exp(logits - logits.max())
        return float(w @ anchors / w.sum()) - target

    bound = 1.0
    while soft_mean(-bound) * soft_mean(bound) > 0 and bound < 1e6:
        bound *= 2.0
    tau = brentq(soft_mean, -bound, bound, xtol=1e-12)
    eta = tau * centered
    row, *_ = np.linalg.lstsq(embedding.anchor_features, eta, rcond=None)
    return row


def init_near_logging(
    logging: LoggingDescription,
    family: str,
    mean_kind: str,
    d: int,
    seed: int = 0,
    noise: float = 0.01,
    embedding: Optional[JointEmbedding] = None,
    gamma: float = 1.0,
) -> PolicyModel:
    """A policy whose mean is (up to small noise) the logging mean.

    The mean-model parameters get independent ``N(0, noise^2)`` perturbations,
    the offset is set so that the expected action matches the logging mean and
    ``sigma`` equals the logging standard deviation. For ``ccp`` models whose
    context map has an intercept, the intercept row is tilted so the
    soft-argmin returns the logging mean exactly.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    rng = np.random.default_rng(seed)
    target = logging.mean if family == "normal" else float(softplus_inv(logging.mean))
    k = MeanModel.param_count(mean_kind, d, embedding)
    params = noise * rng.standard_normal(k) if noise > 0 else np.zeros(k)
    if mean_kind in ("constant", "linear", "poly"):
        params[-1] = target
    elif mean_kind == "ccp":
        if embedding is None:
            raise ValueError("ccp initialization needs an embedding")
        if embedding.context_map.intercept:
            m = embedding.action_embed.m
            params[-m:] += _tilt_intercept(embedding, gamma, target)
    mm = MeanModel(mean_kind, d, params, gamma=gamma, embedding=embedding)
    return PolicyModel(family, mm, math.log(logging.std))


def constant_policy(family: str, mean: float, std: float, d: int = 1) -> PolicyModel:
    """Context-free policy with the given expected action and std."""
    raw = mean if family == "normal" else float(softplus_inv(mean))
    return PolicyModel(family, MeanModel("constant", d, [raw]), math.log(std))
