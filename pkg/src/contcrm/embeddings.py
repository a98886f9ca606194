"""Context feature maps, Nystrom action embedding and their tensor product."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

EIG_FLOOR = 1e-10


def gaussian_kernel(a, b, bandwidth: float) -> np.ndarray:
    """``exp(-bandwidth / 2 * |a - b|^2)`` between two sets of actions."""
    A = _as_points(a)
    B = _as_points(b)
    sq = ((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=-1)
    return np.exp(-0.5 * bandwidth * sq)


def _as_points(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a[:, None]
    return a


@dataclass(frozen=True)
class ContextMap:
    """Feature map on contexts.

    ``linear`` is the identity and ``quadratic`` stacks ``vec(x x^T)`` on top
    of ``x``. With ``intercept=True`` a trailing constant 1 is appended, which
    lets a CCP policy learn a context-free preference over anchors.
    """

    kind: str
    d_in: int
    intercept: bool = False

    def __post_init__(self):
        if self.kind not in ("linear", "quadratic"):
            raise ValueError(f"unknown context map {self.kind!r}")
        if self.d_in < 1:
            raise ValueError("d_in must be positive")

    @property
    def d_out(self) -> int:
        base = self.d_in if self.kind == "linear" else self.d_in * self.d_in + self.d_in
        return base + int(self.intercept)

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.d_in:
            raise ValueError(f"context dimension {X.shape[1]} does not match map d_in={self.d_in}")
        parts = [X]
        if self.kind == "quadratic":
            outer = (X[:, :, None] * X[:, None, :]).reshape(X.shape[0], -1)
            parts = [outer, X]
        if self.intercept:
            parts.append(np.ones((X.shape[0], 1)))
        return np.concatenate(parts, axis=1)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "d_in": self.d_in, "intercept": self.intercept}

    @classmethod
    def from_dict(cls, d: dict) -> "ContextMap":
        return cls(d["kind"], int(d["d_in"]), bool(d.get("intercept", False)))


def select_anchors(actions, m: int, strategy: str = "quantile", seed: int = 0) -> np.ndarray:
    """Pick ``m`` anchor actions from the logged ones.

    ``grid`` spaces anchors evenly between the smallest and largest action,
    ``quantile`` uses the midpoint quantiles ``Q((2i - 1) / (2m))`` and
    ``kmeans`` uses k-means centroids (the only strategy for vector actions).
    """
    acts = np.asarray(actions, dtype=np.float64)
    if m < 1:
        raise ValueError("m must be at least 1")
    if acts.size == 0:
        raise ValueError("no actions to choose anchors from")
    pts = _as_points(acts)
    n_distinct = np.unique(pts, axis=0).shape[0]
    if m > n_distinct:
        raise ValueError(f"m={m} exceeds the number of distinct actions ({n_distinct})")
    if strategy == "kmeans":
        from sklearn.cluster import KMeans

        km = KMeans(n_clusters=m, n_init=10, random_state=seed).fit(pts)
        centers = km.cluster_centers_
        order = np.lexsort(centers.T[::-1])
        centers = centers[order]
        return centers[:, 0] if acts.ndim <= 1 else centers
    if pts.shape[1] != 1:
        raise ValueError(f"strategy {strategy!r} only supports scalar actions; use kmeans")
    flat = pts[:, 0]
    if strategy == "grid":
        if m == 1:
            return np.array([0.5 * (flat.min() + flat.max())])
        return np.linspace(flat.min(), flat.max(), m)
    if strategy == "quantile":
        levels = (2.0 * np.arange(1, m + 1) - 1.0) / (2.0 * m)
        anchors = np.quantile(flat, levels)
        if np.unique(anchors).size < m:
            raise ValueError("quantile anchors are not distinct; use fewer anchors or the grid strategy")
        return anchors
    raise ValueError(f"unknown anchor strategy {strategy!r}")


def median_bandwidth(actions, max_points: int = 2000, seed: int = 0) -> float:
    """Median heuristic: ``1 / median(|a - a'|)^2`` over pairs of actions."""
    pts = _as_points(actions)
    if pts.shape[0] > max_points:
        rng = np.random.default_rng(seed)
        pts = pts[rng.choice(pts.shape[0], max_points, replace=False)]
    dist = pdist(pts)
    dist = dist[dist > 0]
    if dist.size == 0:
        raise ValueError("need at least two distinct actions for the median heuristic")
    return float(1.0 / np.median(dist) ** 2)


@dataclass(frozen=True, eq=False)
class NystromEmbedding:
    anchors: np.ndarray
    bandwidth: float
    whitener: np.ndarray
    n_clamped: int = 0

    @property
    def m(self) -> int:
        return self.whitener.shape[0]

    def __call__(self, a) -> np.ndarray:
        return embed_action(self, a)

    def to_dict(self) -> dict:
        return {
            "anchors": np.asarray(self.anchors).tolist(),
            "bandwidth": self.bandwidth,
            "whitener": self.whitener.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NystromEmbedding":
        return cls(
            np.asarray(d["anchors"], dtype=np.float64),
            float(d["bandwidth"]),
            np.asarray(d["whitener"], dtype=np.float64),
        )


def fit_nystrom(anchors, bandwidth: float) -> NystromEmbedding:
    """Whitener ``K_AA^{-1/2}`` by a symmetric eigendecomposition.

    Eigenvalues under ``1e-10 * lambda_max`` are raised to that floor instead of
    failing, so dense anchor grids still yield a usable projection.
    """
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    pts = _as_points(anchors)
    m = pts.shape[0]
    if m < 1:
        raise ValueError("need at least one anchor")
    sq = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1)
    dup = [(i, j) for i in range(m) for j in range(i + 1, m) if sq[i, j] == 0.0]
    if dup:
        raise ValueError(f"duplicate anchors at index pairs {dup}")
    K = np.exp(-0.5 * bandwidth * sq)
    evals, evecs = np.linalg.eigh(K)
    lam_max = evals[-1]
    if not np.isfinite(lam_max) or lam_max <= 0:
        raise np.linalg.LinAlgError("anchor Gram matrix is not positive definite")
    floor = EIG_FLOOR * lam_max
    clamped = evals < floor
    evals = np.where(clamped, floor, evals)
    W = (evecs / np.sqrt(evals)) @ evecs.T
    W = 0.5 * (W + W.T)
    anchors_arr = np.asarray(anchors, dtype=np.float64)
    return NystromEmbedding(anchors_arr.copy(), float(bandwidth), W, int(clamped.sum()))


def embed_action(ne: NystromEmbedding, a) -> np.ndarray:
    """``psi_A(a) = K_AA^{-1/2} K_A(a)``; rows of the result are embeddings."""
    a_arr = np.asarray(a, dtype=np.float64)
    anchors = np.asarray(ne.anchors)
    if anchors.ndim == 1:
        pts = a_arr.reshape(-1, 1)
    else:
        pts = a_arr.reshape(-1, anchors.shape[1])
    KA = gaussian_kernel(pts, anchors, ne.bandwidth)
    out = KA @ ne.whitener
    if a_arr.ndim == 0 or (anchors.ndim == 2 and a_arr.ndim == 1):
        return out[0]
    return out


@dataclass(frozen=True, eq=False)
class JointEmbedding:
    context_map: ContextMap
    action_embed: NystromEmbedding
    _anchor_features: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_anchor_features", embed_action(self.action_embed, self.action_embed.anchors))

    @property
    def p(self) -> int:
        return self.context_map.d_out * self.action_embed.m

    @property
    def anchor_features(self) -> np.ndarray:
        """Embeddings of the anchors themselves, ``(m, m)``."""
        return self._anchor_features

    def to_dict(self) -> dict:
        return {"context_map": self.context_map.to_dict(), "nystrom": self.action_embed.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "JointEmbedding":
        return cls(ContextMap.from_dict(d["context_map"]), NystromEmbedding.from_dict(d["nystrom"]))


def embed_joint(je: JointEmbedding, x, a) -> np.ndarray:
    """Row-major flattening of ``psi_X(x) (x) psi_A(a)``.

    Accepts a single pair or batches (``x`` of shape ``(n, d)`` and ``a`` of
    length ``n``); the batched result has shape ``(n, p)``.
    """
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    phi_x = je.context_map(X)
    phi_a = np.atleast_2d(embed_action(je.action_embed, a))
    if phi_x.shape[0] != phi_a.shape[0]:
        raise ValueError(f"{phi_x.shape[0]} contexts but {phi_a.shape[0]} actions")
    out = (phi_x[:, :, None] * phi_a[:, None, :]).reshape(phi_x.shape[0], -1)
    return out[0] if single else out
