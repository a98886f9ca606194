"""Learning experiments on the synthetic potential environments.

These drivers compare policy classes trained on logged data from one of the
potential environments, select hyperparameters on a validation split with
SNIPS and score the selected policies online by Monte Carlo.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .data import DataSplit, LoggedDataset, split
from .discrete import BucketPolicy, bucketize, fit_bucket_policy
from .envs import PotentialEnv, generate_potential_env, online_risk
from .estimators import CrmObjective
from .learn import Candidate, ModelConfig, expand_grid, select_on_validation, train_candidate
from .optim import LbfgsConfig, ProxConfig
from .policies import LoggingDescription


@dataclass(frozen=True)
class LearningSetup:
    """Data and evaluation sizes for one learning experiment."""

    env: str = "noisymoons"
    n_per_split: int = 10000
    data_seed: int = 1
    split_seed: int = 0
    eval_contexts: int = 2000
    eval_samples: int = 100
    eval_seed: int = 12345
    max_iter: int = 300

    def to_dict(self) -> dict:
        return asdict(self)


def prepare(setup: LearningSetup):
    """Environment, train/validation/test split and the logging description."""
    env = PotentialEnv(kind=setup.env, seed=setup.data_seed)
    ds, _ = generate_potential_env(env, 3 * setup.n_per_split, seed=setup.data_seed)
    parts = split(ds, (1 / 3, 1 / 3, 1 / 3), seed=setup.split_seed)
    return env, parts, LoggingDescription(env.logging_mean, env.logging_std)


def online_reward(policy, env, setup: LearningSetup) -> float:
    """Monte Carlo reward on fresh contexts shared by every call."""
    return online_risk(policy, env, setup.eval_contexts, setup.eval_samples, seed=setup.eval_seed).reward


def base_candidate(mean_kind: str, setup: LearningSetup, n_anchors: int = 5) -> Candidate:
    model = ModelConfig(family="lognormal", mean_kind=mean_kind, n_anchors=n_anchors)
    obj = CrmObjective("scips", M=12.9, lambda_var=0.0, lambda_ent=1e-3, C_reg=1e-5)
    return Candidate(model, obj, ProxConfig(kappa=0.0, outer_iters=1, inner=LbfgsConfig(max_iter=setup.max_iter)))


def model_grid(mean_kind: str, setup: LearningSetup, n_anchors: int = 5, **axes) -> list[Candidate]:
    axes.setdefault("M", (4.6, 12.9))
    axes.setdefault("lambda_var", (0.0, 0.01))
    return expand_grid(base_candidate(mean_kind, setup, n_anchors), **axes)


@dataclass
class SelectedModel:
    name: str
    valid_snips: float
    online_reward: float
    candidate: Optional[dict]

    def to_dict(self) -> dict:
        return asdict(self)


def _select_and_score(name, candidates, parts: DataSplit, logging, env, setup, seed, jobs) -> SelectedModel:
    best, _ = select_on_validation(candidates, parts.train, parts.valid, logging, nu=0.01, seed=seed, jobs=jobs)
    if best is None:
        return SelectedModel(name, math.nan, math.nan, None)
    return SelectedModel(name, -best.valid_snips, online_reward(best.policy, env, setup), best.candidate.to_dict())


def learning_comparison(setup: LearningSetup = LearningSetup(), seed: int = 0, jobs: int = 1) -> dict:
    """Logging, constant, linear and CCP policies on one environment.

    Each class is tuned on the validation split over the same objective grid;
    CCP additionally tries three softmax temperatures.
    """
    env, parts, logging = prepare(setup)
    out = {"logging": online_reward(env.logging_policy(), env, setup)}
    grids = {
        "constant": model_grid("constant", setup),
        "linear": model_grid("linear", setup),
        "ccp": model_grid("ccp", setup, gamma=(1.0, 10.0, 100.0)),
    }
    for name, cands in grids.items():
        out[name] = _select_and_score(name, cands, parts, logging, env, setup, seed, jobs).to_dict()
    return out


# ---------------------------------------------------------------------------
# continuous versus discretized actions
# ---------------------------------------------------------------------------


def discrete_snips(bp: BucketPolicy, ds: LoggedDataset) -> float:
    """Self-normalized discrete IPS of a bucket policy on logged data.

    The logging probability of a bucket is its empirical frequency in ``ds``.
    """
    b = bucketize(ds.actions, bp.edges)
    p0 = np.bincount(b, minlength=bp.m) / ds.n
    P = bp.probabilities(ds.contexts)
    w = P[np.arange(ds.n), b] / p0[b]
    return float(np.sum(ds.costs * w) / np.sum(w))


def discrete_policy(parts: DataSplit, m: int, Cs: Sequence[float] = (1e-5, 1e-3, 1e-1), max_iter: int = 500):
    """Bucket policy with ``C`` chosen by validation SNIPS."""
    fits = [fit_bucket_policy(parts.train, m, C=C, inner=LbfgsConfig(max_iter=max_iter)) for C in Cs]
    scores = [discrete_snips(bp, parts.valid) for bp in fits]
    k = int(np.argmin(scores))
    return fits[k], Cs[k], -scores[k]


def discretization_comparison(
    setup: LearningSetup = LearningSetup(), anchors: Sequence[int] = (2, 3, 5, 7, 10), seed: int = 0, jobs: int = 1
) -> list[dict]:
    """CCP with ``m`` anchors against an ``m``-bucket discrete policy."""
    env, parts, logging = prepare(setup)
    rows = []
    for m in anchors:
        cands = model_grid("ccp", setup, n_anchors=m, gamma=(1.0, 10.0, 100.0))
        ccp = _select_and_score(f"ccp-{m}", cands, parts, logging, env, setup, seed, jobs)
        bp, C, val = discrete_policy(parts, m)
        rows.append(
            {
                "m": m,
                "ccp_reward": ccp.online_reward,
                "ccp_valid": ccp.valid_snips,
                "ccp_candidate": ccp.candidate,
                "discrete_reward": online_reward(bp, env, setup),
                "discrete_valid": val,
                "discrete_C": C,
            }
        )
    return rows


# ---------------------------------------------------------------------------
# proximal point versus plain L-BFGS
# ---------------------------------------------------------------------------


def _ppa_task(args):
    cand, parts_train, seed = args
    t0 = time.perf_counter()
    fit = train_candidate(cand, parts_train, seed=seed)
    return fit.train.final_objective, time.perf_counter() - t0


def ppa_comparison(
    setup: LearningSetup = LearningSetup(n_per_split=3000),
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    kappa: float = 0.1,
    outer_iters: int = 10,
    inner_per_outer: int = 100,
    jobs: int = 1,
    **axes,
) -> dict:
    """Paired final training objectives with and without the proximal loop.

    Every (seed, hyperparameter) configuration is trained twice from the same
    initialization: once by a single L-BFGS run and once by ``outer_iters``
    proximal iterations whose subproblems are capped at ``inner_per_outer``
    L-BFGS iterations each (the plain run gets ``setup.max_iter``).
    """
    env, parts, logging = prepare(setup)
    axes.setdefault("M", (4.6, 21.5))
    axes.setdefault("gamma", (1.0, 100.0))
    grid = model_grid("ccp", setup, lambda_var=(0.0,), **axes)
    plain_cands, prox_cands, seeds_used = [], [], []
    for s in seeds:
        for c in grid:
            plain_cands.append(c)
            prox_cands.append(replace(c, prox=replace(c.prox, kappa=kappa, outer_iters=outer_iters, inner=LbfgsConfig(max_iter=inner_per_outer))))
            seeds_used.append(s)
    tasks = [(c, parts.train, s) for c, s in zip(plain_cands + prox_cands, seeds_used + seeds_used)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_ppa_task, tasks))
    else:
        results = [_ppa_task(t) for t in tasks]
    k = len(plain_cands)
    plain = np.array([r[0] for r in results[:k]])
    prox = np.array([r[0] for r in results[k:]])
    t_plain = sum(r[1] for r in results[:k])
    t_prox = sum(r[1] for r in results[k:])
    return {
        "n_configs": k,
        "plain_objective": plain.tolist(),
        "prox_objective": prox.tolist(),
        "median_plain": float(np.median(plain)),
        "median_prox": float(np.median(prox)),
        "time_plain": t_plain,
        "time_prox": t_prox,
        "time_ratio": t_prox / t_plain,
        "prox_wins": int((prox < plain).sum()),
    }
