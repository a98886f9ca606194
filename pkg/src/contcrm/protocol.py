"""Offline evaluation protocol, diagnostics and model selection.

The protocol decides whether a candidate policy improves on the logging
policy using only logged data:

1. compute the effective sample size ratio of the importance weights on the
   validation split (and, conservatively, on the test split); if either does
   not exceed ``nu`` the estimate is declared invalid and the null hypothesis
   ``L(pi) >= L(pi0)`` is kept;
2. otherwise bootstrap the self-normalized estimate on the test split and
   reject the null when the upper ``1 - delta`` percentile lies below the
   logging risk.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .data import LoggedDataset, kfold_indices
from .envs import reward_piecewise
from .estimators import WeightStats, importance_weights
from .policies import PolicyModel, constant_policy


class NoEligibleCandidateError(RuntimeError):
    """Every candidate failed the effective-sample-size test on every fold."""


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    estimates: np.ndarray  # kept resamples only
    n_boot: int
    n_skipped: int
    delta: float

    @property
    def valid(self) -> bool:
        return self.n_skipped <= 0.5 * self.n_boot and self.estimates.size > 0

    @property
    def lower(self) -> float:
        return float(np.quantile(self.estimates, self.delta / 2)) if self.valid else math.nan

    @property
    def upper(self) -> float:
        return float(np.quantile(self.estimates, 1 - self.delta / 2)) if self.valid else math.nan

    @property
    def upper_one_sided(self) -> float:
        return float(np.quantile(self.estimates, 1 - self.delta)) if self.valid else math.nan


def resample_indices(n: int, n_boot: int, seed) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, n, size=(n_boot, n))


def bootstrap_weighted(y, w, n_boot: int = 100, seed=0, delta: float = 0.05, self_normalized: bool = True):
    """Bootstrap the SNIPS (or IPS) estimate from costs and weights.

    Resamples whose weights sum to zero are skipped and counted; with more
    than half skipped the result is marked invalid.
    """
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    idx = resample_indices(y.shape[0], n_boot, seed)
    num, den = kernels.bootstrap_sums(y * w, w, idx)
    if self_normalized:
        keep = den > 0
        est = num[keep] / den[keep]
        return BootstrapResult(est, n_boot, int((~keep).sum()), delta)
    return BootstrapResult(num / y.shape[0], n_boot, 0, delta)


def bootstrap_snips(pm: PolicyModel, ds: LoggedDataset, n_boot: int = 100, seed=0, delta: float = 0.05):
    """Percentile bootstrap of the SNIPS cost of ``pm`` on ``ds``."""
    if ds.n < 30:
        import warnings

        warnings.warn(f"bootstrap on only {ds.n} rows", RuntimeWarning, stacklevel=2)
    w = importance_weights(pm, ds).weights
    return bootstrap_weighted(ds.costs, w, n_boot, seed, delta)


# ---------------------------------------------------------------------------
# protocol decision
# ---------------------------------------------------------------------------


@dataclass
class ProtocolReport:
    snips_estimate: float
    ips_estimate: float
    ess_ratio: float
    ess_ratio_test: float
    mean_weight: float
    valid: bool
    reject_H0: bool
    ci: tuple
    upper_bound: float
    logging_risk_estimate: float
    delta: float
    nu: float
    n_boot: int
    n_skipped: int
    estimator: str = "snips"
    reason: str = ""

    def to_dict(self) -> dict:
        out = asdict(self)
        out["ci"] = list(self.ci)
        out["snips_reward"] = -self.snips_estimate if np.isfinite(self.snips_estimate) else None
        out["ips_reward"] = -self.ips_estimate
        return {k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in out.items()}


def _weights(pm_or_weights, ds: LoggedDataset) -> WeightStats:
    if isinstance(pm_or_weights, PolicyModel):
        return importance_weights(pm_or_weights, ds)
    return WeightStats.from_weights(pm_or_weights)


def evaluate_protocol(
    pm,
    ds_valid: LoggedDataset,
    ds_test: LoggedDataset,
    logging_risk_estimate: Optional[float] = None,
    nu: float = 0.01,
    delta: float = 0.05,
    n_boot: int = 100,
    seed=0,
    estimator: str = "snips",
) -> ProtocolReport:
    """Run the offline protocol for one policy.

    ``pm`` is a policy, or a pair of precomputed weight vectors
    ``(w_valid, w_test)``. ``logging_risk_estimate`` defaults to the mean test
    cost. ``estimator="ips"`` tests with the bootstrap of plain IPS instead of
    SNIPS (the comparison protocol).
    """
    if estimator not in ("snips", "ips"):
        raise ValueError("protocol estimator must be 'snips' or 'ips'")
    if isinstance(pm, PolicyModel):
        sv, st = importance_weights(pm, ds_valid), importance_weights(pm, ds_test)
    else:
        sv, st = WeightStats.from_weights(pm[0]), WeightStats.from_weights(pm[1])
    y = ds_test.costs
    ref = float(y.mean()) if logging_risk_estimate is None else float(logging_risk_estimate)
    w = st.weights
    s1, _, sy = kernels.weight_moments(w, y)
    snips = sy / s1 if s1 > 0 else math.nan
    ips = sy / ds_test.n
    boot = bootstrap_weighted(y, w, n_boot, seed, delta, self_normalized=(estimator == "snips"))
    reasons = []
    if not sv.ess_ratio > nu:
        reasons.append(f"validation ESS ratio {sv.ess_ratio:.4g} <= nu")
    if not st.ess_ratio > nu:
        reasons.append(f"test ESS ratio {st.ess_ratio:.4g} <= nu")
    if not boot.valid or (estimator == "snips" and not np.isfinite(snips)):
        reasons.append("self-normalized estimate undefined (weights sum to zero)")
    valid = not reasons
    upper = boot.upper_one_sided
    reject = bool(valid and upper < ref)
    return ProtocolReport(
        snips_estimate=float(snips),
        ips_estimate=float(ips),
        ess_ratio=float(sv.ess_ratio),
        ess_ratio_test=float(st.ess_ratio),
        mean_weight=float(sv.mean_weight),
        valid=valid,
        reject_H0=reject,
        ci=(boot.lower, boot.upper),
        upper_bound=float(upper),
        logging_risk_estimate=ref,
        delta=delta,
        nu=nu,
        n_boot=n_boot,
        n_skipped=boot.n_skipped,
        estimator=estimator,
        reason="; ".join(reasons),
    )


# ---------------------------------------------------------------------------
# cross-validation with fold discarding
# ---------------------------------------------------------------------------


@dataclass
class FoldScore:
    candidate: int
    fold: int
    snips: float
    ess_ratio: float
    kept: bool


@dataclass
class CrossValidation:
    best_index: int
    scores: list  # mean SNIPS over surviving folds (nan when ineligible)
    folds: list = field(default_factory=list)

    def table(self) -> list[dict]:
        return [asdict(f) for f in self.folds]


def _cv_task(args):
    ci, fi, cand, ds, train_idx, test_idx, nu, seed = args
    from .learn import train_candidate

    train, held = ds.subset(train_idx), ds.subset(test_idx)
    fit = train_candidate(cand, train, seed=seed)
    stats = importance_weights(fit.policy, held)
    s1, _, sy = kernels.weight_moments(stats.weights, held.costs)
    snips = sy / s1 if s1 > 0 else math.nan
    kept = bool(stats.ess_ratio > nu and np.isfinite(snips))
    return FoldScore(ci, fi, float(snips), float(stats.ess_ratio), kept)


def cross_validate(candidates: Sequence, ds: LoggedDataset, k_folds: int = 5, nu: float = 0.01, seed: int = 0, jobs: int = 1):
    """k-fold model selection that discards folds failing the ESS test.

    Each candidate is trained on ``k - 1`` folds and scored by SNIPS on the
    held-out fold. Folds whose ESS ratio does not exceed ``nu`` are dropped
    for that candidate only; the score is the mean over the remaining folds.
    Candidates with no surviving fold are ineligible. Ties go to the smaller
    clipping constant ``M`` and then the smaller variance weight.
    """
    from .learn import conservative_key

    folds = kfold_indices(ds.n, k_folds, seed)
    everything = np.arange(ds.n)
    tasks = []
    for ci, cand in enumerate(candidates):
        for fi, held in enumerate(folds):
            train_idx = np.setdiff1d(everything, held, assume_unique=True)
            tasks.append((ci, fi, cand, ds, train_idx, held, nu, seed))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_cv_task, tasks))
    else:
        results = [_cv_task(t) for t in tasks]
    scores = []
    for ci in range(len(candidates)):
        kept = [f.snips for f in results if f.candidate == ci and f.kept]
        scores.append(float(np.mean(kept)) if kept else math.nan)
    eligible = [ci for ci, s in enumerate(scores) if np.isfinite(s)]
    if not eligible:
        raise NoEligibleCandidateError(
            "no candidate passed the effective sample size test on any fold; "
            "initialize the policies closer to the logging policy"
        )
    best = min(eligible, key=lambda ci: conservative_key(scores[ci], candidates[ci], ci))
    return CrossValidation(best, scores, results)


# ---------------------------------------------------------------------------
# protocol validation experiment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProtocolScenario:
    """One-dimensional scenario used to validate the protocol.

    Logging is lognormal with the given mean and std; the reference optimum is
    Gaussian. Rewards are the triangle ``reward_piecewise`` peaked at
    ``reward_peak`` (defaults to the optimum's mean) and costs are
    ``cost_offset - reward``. Setup (i) perturbs the logging parameters with
    noise ``noise_i`` on (mean, log-std); setup (ii) perturbs the optimum with
    ``noise_ii``. Each candidate gets fresh validation and test logs of
    ``n_logged`` rows.
    """

    logging_mean: float = 2.0
    logging_std: float = 0.5
    target_mean: float = 1.75
    target_std: float = 0.3
    reward_peak: Optional[float] = None
    rho_left: float = 2.0
    rho_right: float = 1.0
    noise_i: tuple = (0.2, 0.4)
    noise_ii: tuple = (0.5, 0.25)
    n_logged: int = 300
    cost_offset: float = 0.75
    nu: float = 0.01
    delta: float = 0.05
    n_boot: int = 100

    @property
    def peak(self) -> float:
        return self.target_mean if self.reward_peak is None else self.reward_peak

    def reward(self, a):
        return reward_piecewise(a, self.peak, self.rho_left, self.rho_right)

    def logging_policy(self) -> PolicyModel:
        return constant_policy("lognormal", self.logging_mean, self.logging_std)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["noise_i"] = list(self.noise_i)
        out["noise_ii"] = list(self.noise_ii)
        return out


_QUAD_GRID = np.linspace(-6.0, 12.0, 36001)


def quadrature_risk(pm: PolicyModel, scenario: ProtocolScenario) -> float:
    """Exact-up-to-quadrature risk of a context-free 1-D policy."""
    dens = pm.density(np.zeros((_QUAD_GRID.shape[0], pm.d)), _QUAD_GRID)
    er = np.trapezoid(dens * scenario.reward(_QUAD_GRID), _QUAD_GRID)
    return float(scenario.cost_offset - er)


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        denom = 2 * self.tp + self.fp + self.fn
        return 2 * self.tp / denom if denom else 0.0

    def to_dict(self) -> dict:
        return {**asdict(self), "precision": self.precision, "recall": self.recall, "f1": self.f1}


def confusion(truth, decision) -> ConfusionCounts:
    truth = np.asarray(truth, dtype=bool)
    decision = np.asarray(decision, dtype=bool)
    return ConfusionCounts(
        int((truth & decision).sum()),
        int((~truth & decision).sum()),
        int((truth & ~decision).sum()),
        int((~truth & ~decision).sum()),
    )


@dataclass(eq=False)
class ValidationSummary:
    """Per-candidate records of one setup and the resulting confusion tables.

    ``truth`` marks candidates that truly improve on logging (``L <= L0``).
    ``raw_reject`` holds the bootstrap decision before the ESS filter, so the
    filter can be re-applied at other thresholds.
    """

    setup: str
    scenario: ProtocolScenario
    logging_risk: float
    online_risk: np.ndarray
    truth: np.ndarray
    ess_valid: np.ndarray
    ess_test: np.ndarray
    raw_reject: dict  # estimator -> bool array
    params: np.ndarray  # (n, 2): candidate mean and std

    def decisions(self, estimator: str, nu: Optional[float] = None) -> np.ndarray:
        nu = self.scenario.nu if nu is None else nu
        ok = (self.ess_valid > nu) & (self.ess_test > nu)
        return self.raw_reject[estimator] & ok

    def counts(self, estimator: str, nu: Optional[float] = None) -> ConfusionCounts:
        return confusion(self.truth, self.decisions(estimator, nu))

    def to_dict(self) -> dict:
        return {
            "setup": self.setup,
            "scenario": self.scenario.to_dict(),
            "logging_risk": self.logging_risk,
            "n_policies": int(self.truth.shape[0]),
            "counts": {e: self.counts(e).to_dict() for e in self.raw_reject},
        }

    def records(self) -> list[dict]:
        rows = []
        for i in range(self.truth.shape[0]):
            rows.append(
                {
                    "index": i,
                    "mean": float(self.params[i, 0]),
                    "std": float(self.params[i, 1]),
                    "online_risk": float(self.online_risk[i]),
                    "improves": bool(self.truth[i]),
                    "ess_valid": float(self.ess_valid[i]),
                    "ess_test": float(self.ess_test[i]),
                    **{f"reject_{e}": bool(self.decisions(e)[i]) for e in self.raw_reject},
                }
            )
        return rows


def _perturbed_policy(setup: str, scenario: ProtocolScenario, e) -> PolicyModel:
    if setup == "i":
        mean = scenario.logging_mean + scenario.noise_i[0] * e[0]
        std = scenario.logging_std * math.exp(scenario.noise_i[1] * e[1])
        return constant_policy("lognormal", max(mean, 1e-3), std)
    mean = scenario.target_mean + scenario.noise_ii[0] * e[0]
    std = scenario.target_std * math.exp(scenario.noise_ii[1] * e[1])
    return constant_policy("normal", mean, std)


def _validation_task(args):
    setup, scenario, seed, k = args
    rng = np.random.default_rng([seed, 0 if setup == "i" else 1, k])
    logging = scenario.logging_policy()
    zeros = np.zeros((scenario.n_logged, 1))
    logs = []
    for _ in range(2):
        a = logging.sample(zeros, rng)
        logs.append(LoggedDataset(zeros, a, logging.density(zeros, a), scenario.cost_offset - scenario.reward(a)))
    ds_valid, ds_test = logs
    boot_seed = int(rng.integers(2**63 - 1))
    e = rng.standard_normal(2)
    pm = _perturbed_policy(setup, scenario, e)
    risk = quadrature_risk(pm, scenario)
    weights = (importance_weights(pm, ds_valid).weights, importance_weights(pm, ds_test).weights)
    out = {}
    for est in ("ips", "snips"):
        rep = evaluate_protocol(
            weights, ds_valid, ds_test, None, nu=0.0, delta=scenario.delta, n_boot=scenario.n_boot, seed=boot_seed, estimator=est
        )
        out[est] = rep
    snips_rep = out["snips"]
    raw = {est: bool(np.isfinite(r.upper_bound) and r.upper_bound < r.logging_risk_estimate) for est, r in out.items()}
    return risk, snips_rep.ess_ratio, snips_rep.ess_ratio_test, raw, (pm.mean(np.zeros((1, 1)))[0], pm.sigma)


def validate_protocol_experiment(
    setup: str,
    n_policies: int = 2000,
    n_logged: Optional[int] = None,
    seed: int = 0,
    scenario: Optional[ProtocolScenario] = None,
    jobs: int = 1,
) -> ValidationSummary:
    """Count protocol false positives and negatives against the quadrature truth."""
    if setup not in ("i", "ii"):
        raise ValueError("setup must be 'i' or 'ii'")
    scenario = scenario or ProtocolScenario()
    if n_logged is not None:
        from dataclasses import replace

        scenario = replace(scenario, n_logged=int(n_logged))
    L0 = quadrature_risk(scenario.logging_policy(), scenario)
    tasks = [(setup, scenario, seed, k) for k in range(n_policies)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_validation_task, tasks, chunksize=64))
    else:
        results = [_validation_task(t) for t in tasks]
    risk = np.array([r[0] for r in results])
    return ValidationSummary(
        setup=setup,
        scenario=scenario,
        logging_risk=L0,
        online_risk=risk,
        truth=risk <= L0,
        ess_valid=np.array([r[1] for r in results]),
        ess_test=np.array([r[2] for r in results]),
        raw_reject={e: np.array([r[3][e] for r in results]) for e in ("ips", "snips")},
        params=np.array([r[4] for r in results]),
    )


ESS_SWEEP = (0.0, 0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5)


def ess_sweep(summary: ValidationSummary, nus: Sequence[float] = ESS_SWEEP, estimator: str = "snips") -> list[dict]:
    """Precision, recall and F1 of the protocol as the ESS threshold varies."""
    return [{"nu": float(nu), **summary.counts(estimator, nu).to_dict()} for nu in nus]


def has_interior_maximum(values: Sequence[float]) -> bool:
    """True when some inner entry beats both ends of the sequence."""
    v = list(values)
    if len(v) < 3:
        return False
    inner = max(v[1:-1])
    return inner > v[0] and inner > v[-1]


# ---------------------------------------------------------------------------
# what-if diagnostics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WhatIfSetup:
    """Logging draws ``d`` iid lognormal coordinates with log-scale parameters
    ``(log_mean, log_std)``; the target draws iid ``N(mu, target_std^2)``."""

    d: int = 3
    log_mean: float = 1.0
    log_std: float = 0.5
    target_std: float = 0.5

    @property
    def mode(self) -> float:
        return math.exp(self.log_mean - self.log_std**2)

    @property
    def std(self) -> float:
        s2 = self.log_std**2
        return math.sqrt((math.exp(s2) - 1.0) * math.exp(2 * self.log_mean + s2))

    def default_grid(self, n_points: int = 13, width: float = 3.0) -> np.ndarray:
        return self.mode + self.std * np.linspace(-width, width, n_points)


@dataclass
class WhatIfRow:
    mu: float
    ess_ratio: float
    mean_weight: float
    mean_weight_se: float
    estimate: float
    ci_width: float


def whatif_diagnostics(mu_grid=None, n: int = 10000, seed: int = 0, setup: WhatIfSetup = WhatIfSetup(), n_boot: int = 100, delta: float = 0.05) -> list[WhatIfRow]:
    """Importance sampling diagnostics for estimating ``E[max(X)]``.

    One logged sample is shared by all grid points, so the diagnostics differ
    only through the target mean.
    """
    from scipy.stats import lognorm, norm

    grid = setup.default_grid() if mu_grid is None else np.asarray(mu_grid, dtype=np.float64)
    if grid.size == 0:
        raise ValueError("empty grid")
    rng = np.random.default_rng(seed)
    X = np.exp(setup.log_mean + setup.log_std * rng.standard_normal((n, setup.d)))
    f = X.max(axis=1)
    logp0 = lognorm(s=setup.log_std, scale=math.exp(setup.log_mean)).logpdf(X).sum(axis=1)
    boot_seed = int(rng.integers(2**63 - 1))
    rows = []
    for mu in grid:
        logp = norm(mu, setup.target_std).logpdf(X).sum(axis=1)
        w = np.exp(logp - logp0)
        stats = WeightStats.from_weights(w)
        se = float(w.std(ddof=1) / math.sqrt(n))
        boot = bootstrap_weighted(f, w, n_boot, boot_seed, delta)
        s1, _, sy = kernels.weight_moments(w, f)
        est = sy / s1 if s1 > 0 else math.nan
        width = boot.upper - boot.lower if boot.valid else math.nan
        rows.append(WhatIfRow(float(mu), stats.ess_ratio, stats.mean_weight, se, float(est), float(width)))
    return rows
