"""Building, training and selecting policies from configuration objects."""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .data import LoggedDataset
from .embeddings import ContextMap, JointEmbedding, fit_nystrom, median_bandwidth, select_anchors
from .estimators import CrmObjective, InvalidEstimateError, estimate, importance_weights
from .optim import ProxConfig, TrainResult, proximal_train
from .policies import LoggingDescription, PolicyModel, init_near_logging

# Hyperparameter grids for the synthetic environments.
LAMBDA_GRID = (0.0, 0.001, 0.01, 0.1, 1.0, 10.0, 100.0)
M_GRID = (1.0, 1.7, 2.8, 4.6, 7.7, 12.9, 21.5, 35.9, 59.9, 100.0)
KAPPA_GRID = (0.001, 0.01, 0.1, 1.0)
C_GRID = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1)
ANCHOR_GRID = (2, 3, 5, 7, 10)
GAMMA_GRID = (1.0, 10.0, 100.0)


@dataclass(frozen=True)
class ModelConfig:
    """How to build the initial policy.

    The CCP fields (anchors, context map, temperature, bandwidth) are ignored
    by the other mean kinds. ``bandwidth=None`` means the median heuristic.
    """

    family: str = "lognormal"
    mean_kind: str = "ccp"
    n_anchors: int = 5
    anchor_strategy: str = "grid"
    context_map: str = "quadratic"
    intercept: bool = True
    gamma: float = 10.0
    bandwidth: Optional[float] = None
    init_noise: float = 0.01

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = cls.__dataclass_fields__.keys()
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class Candidate:
    model: ModelConfig
    objective: CrmObjective
    prox: ProxConfig = ProxConfig(kappa=0.0, outer_iters=1)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "objective": self.objective.to_dict(), "prox": self.prox.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Candidate":
        return cls(
            ModelConfig.from_dict(d.get("model", {})),
            CrmObjective.from_dict(d.get("objective", {})),
            ProxConfig.from_dict(d.get("prox", {"kappa": 0.0, "outer_iters": 1})),
        )


def build_embedding(cfg: ModelConfig, actions, d: int, seed: int = 0) -> JointEmbedding:
    anchors = select_anchors(actions, cfg.n_anchors, cfg.anchor_strategy, seed=seed)
    bw = cfg.bandwidth if cfg.bandwidth is not None else median_bandwidth(actions, seed=seed)
    return JointEmbedding(ContextMap(cfg.context_map, d, cfg.intercept), fit_nystrom(anchors, bw))


def initial_policy(
    cfg: ModelConfig, ds: LoggedDataset, logging: Optional[LoggingDescription] = None, seed: int = 0
) -> PolicyModel:
    """Policy close to the logging one, built from ``cfg`` on ``ds``'s actions."""
    logging = logging or LoggingDescription.from_actions(ds.actions)
    emb = build_embedding(cfg, ds.actions, ds.d, seed) if cfg.mean_kind == "ccp" else None
    return init_near_logging(
        logging, cfg.family, cfg.mean_kind, ds.d, seed=seed, noise=cfg.init_noise, embedding=emb, gamma=cfg.gamma
    )


@dataclass
class FitResult:
    policy: PolicyModel
    train: TrainResult
    candidate: Candidate


def train_candidate(
    cand: Candidate, ds: LoggedDataset, logging: Optional[LoggingDescription] = None, seed: int = 0
) -> FitResult:
    pm0 = initial_policy(cand.model, ds, logging, seed)
    res = proximal_train(pm0, ds, cand.objective, cand.prox)
    return FitResult(pm0.with_theta(res.theta), res, cand)


def expand_grid(base: Candidate, **axes: Sequence) -> list[Candidate]:
    """Cartesian product of overrides on a base candidate.

    Keys name fields of the model config, the objective or the proximal
    config, e.g. ``expand_grid(base, M=[1, 10], n_anchors=[3, 5])``.
    """
    model_keys = set(ModelConfig.__dataclass_fields__)
    obj_keys = set(CrmObjective.__dataclass_fields__)
    prox_keys = set(ProxConfig.__dataclass_fields__)
    names = list(axes)
    out = []
    for values in itertools.product(*(axes[k] for k in names)):
        model, obj, prox = base.model, base.objective, base.prox
        for k, v in zip(names, values):
            if k in model_keys:
                model = replace(model, **{k: v})
            elif k in obj_keys:
                obj = replace(obj, **{k: v})
            elif k in prox_keys:
                prox = replace(prox, **{k: v})
            else:
                raise KeyError(f"unknown hyperparameter {k!r}")
        out.append(Candidate(model, obj, prox))
    return out


@dataclass
class SelectionRow:
    index: int
    candidate: Candidate
    valid_snips: float
    ess_ratio: float
    eligible: bool
    policy: Optional[PolicyModel] = field(default=None, repr=False)
    train_objective: float = math.nan

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "candidate": self.candidate.to_dict(),
            "valid_snips": self.valid_snips,
            "ess_ratio": self.ess_ratio,
            "eligible": self.eligible,
            "train_objective": self.train_objective,
        }


def conservative_key(score: float, cand: Candidate, index: int):
    """Sort key: lower cost first, ties to smaller M, then smaller lambda_var."""
    return (score, cand.objective.M, cand.objective.lambda_var, index)


def _fit_and_score(args):
    index, cand, train, valid, logging, nu, seed = args
    try:
        fit = train_candidate(cand, train, logging, seed)
    except (FloatingPointError, np.linalg.LinAlgError):  # pragma: no cover - defensive
        return SelectionRow(index, cand, math.nan, 0.0, False, None)
    stats = importance_weights(fit.policy, valid)
    try:
        snips = estimate(fit.policy, valid, CrmObjective("snips"))
    except InvalidEstimateError:
        snips = math.nan
    eligible = bool(stats.ess_ratio > nu and np.isfinite(snips))
    return SelectionRow(index, cand, snips, stats.ess_ratio, eligible, fit.policy, fit.train.final_objective)


def select_on_validation(
    candidates: Sequence[Candidate],
    train: LoggedDataset,
    valid: LoggedDataset,
    logging: Optional[LoggingDescription] = None,
    nu: float = 0.01,
    seed: int = 0,
    jobs: int = 1,
) -> tuple[Optional[SelectionRow], list[SelectionRow]]:
    """Train every candidate on ``train`` and keep the best validation SNIPS.

    Candidates whose validation ESS ratio does not exceed ``nu`` are
    ineligible. Returns ``(best_row, all_rows)``; ``best_row`` is ``None``
    when nothing is eligible.
    """
    tasks = [(i, c, train, valid, logging, nu, seed) for i, c in enumerate(candidates)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_fit_and_score, tasks))
    else:
        rows = [_fit_and_score(t) for t in tasks]
    eligible = [r for r in rows if r.eligible]
    if not eligible:
        return None, rows
    best = min(eligible, key=lambda r: conservative_key(r.valid_snips, r.candidate, r.index))
    return best, rows
