"""Synthetic and semi-synthetic environments with known reward functions.

Every environment can produce a logged dataset (context, action, propensity,
cost) from its logging policy and can score any policy online by Monte Carlo,
because the hidden quantity that drives the cost (a potential or a
therapeutic dose) is available to the simulator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import norm
from sklearn.datasets import make_blobs, make_circles, make_moons

from .data import LoggedDataset
from .policies import MeanModel, PolicyModel, constant_policy, lognormal_params

ENV_KINDS = ("noisymoons", "noisycircles", "anisotropic")

# Shear applied to the anisotropic blobs (the classic sklearn demo transform).
_SHEAR = np.array([[0.6, -0.6], [-0.4, 0.8]])
_BLOB_CENTERS = np.array([[-2.0, 0.0], [0.0, 2.0], [2.0, 0.0]])


def reward_piecewise(a, p, rho_left: float = 2.0, rho_right: float = 1.0):
    """Triangle reward peaked at ``a = p`` with value 1.

    Rises linearly over ``rho_left`` below the peak and falls over
    ``rho_right`` above it; zero outside.
    """
    a = np.asarray(a, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    below = np.maximum(0.0, 1.0 - (p - a) / rho_left)
    above = np.maximum(0.0, 1.0 - (a - p) / rho_right)
    out = np.where(a <= p, below, above)
    return float(out) if out.ndim == 0 else out


def warfarin_cost(a, t_star):
    """Dose error beyond a 10% tolerance: ``max(|a - t*| - 0.1 t*, 0)``."""
    a = np.asarray(a, dtype=np.float64)
    t_star = np.asarray(t_star, dtype=np.float64)
    out = np.maximum(np.abs(a - t_star) - 0.1 * t_star, 0.0)
    return float(out) if out.ndim == 0 else out


def _sk_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**31 - 1))


@dataclass(frozen=True)
class PotentialEnv:
    """Clustered contexts with a hidden per-row potential.

    A hidden group ``g`` picks the context cluster and the potential
    ``p ~ N(mu_g, sigma_p^2)``; the reward of action ``a`` is
    ``reward_piecewise(a, p)``. The logging policy ignores the context: a
    lognormal with mean equal to the population mean potential.
    """

    kind: str = "noisymoons"
    group_means: Optional[tuple] = None
    potential_std: float = 0.3
    reward_widths: tuple = (2.0, 1.0)
    context_noise: float = 0.1
    logging_std: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ENV_KINDS:
            raise ValueError(f"unknown environment {self.kind!r}; choose from {ENV_KINDS}")
        n_groups = 3 if self.kind == "anisotropic" else 2
        means = self.group_means
        if means is None:
            means = tuple(float(k) for k in range(1, n_groups + 1))
        if len(means) != n_groups:
            raise ValueError(f"{self.kind} has {n_groups} groups, got {len(means)} means")
        object.__setattr__(self, "group_means", tuple(float(m) for m in means))
        if not (self.reward_widths[0] > 0 and self.reward_widths[1] > 0):
            raise ValueError("reward widths must be positive")
        if not self.potential_std >= 0:
            raise ValueError("potential_std must be nonnegative")

    @property
    def n_groups(self) -> int:
        return len(self.group_means)

    @property
    def d(self) -> int:
        return 2

    @property
    def logging_mean(self) -> float:
        return float(np.mean(self.group_means))

    def logging_policy(self) -> PolicyModel:
        return constant_policy("lognormal", self.logging_mean, self.logging_std, d=2)

    def sample_groups_contexts(self, n: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("n must be at least 1")
        if self.kind == "noisymoons":
            X, g = make_moons(n_samples=n, noise=self.context_noise, random_state=_sk_seed(rng))
        elif self.kind == "noisycircles":
            X, g = make_circles(n_samples=n, noise=self.context_noise, factor=0.5, random_state=_sk_seed(rng))
        else:
            X, g = make_blobs(n_samples=n, centers=_BLOB_CENTERS, cluster_std=0.5, random_state=_sk_seed(rng))
            X = X @ _SHEAR
        return X.astype(np.float64), g.astype(int)

    def sample_hidden(self, n: int, rng: np.random.Generator):
        """Contexts and their hidden potentials."""
        X, g = self.sample_groups_contexts(n, rng)
        p = np.asarray(self.group_means)[g] + self.potential_std * rng.standard_normal(n)
        return X, p

    def cost(self, a, hidden):
        """Cost (negative reward) of actions ``a`` given potentials."""
        return -reward_piecewise(a, hidden, *self.reward_widths)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "group_means": list(self.group_means),
            "potential_std": self.potential_std,
            "reward_widths": list(self.reward_widths),
            "context_noise": self.context_noise,
            "logging_std": self.logging_std,
            "seed": self.seed,
        }


def generate_potential_env(env: PotentialEnv, n: int, seed: Optional[int] = None):
    """Logged dataset from the environment's logging policy plus potentials."""
    rng = np.random.default_rng(env.seed if seed is None else seed)
    X, p = env.sample_hidden(n, rng)
    logging = env.logging_policy()
    a = logging.sample(X, rng)
    prop = logging.density(X, a)
    return LoggedDataset(X, a, prop, env.cost(a, p)), p


# ---------------------------------------------------------------------------
# Warfarin-style dosing
# ---------------------------------------------------------------------------

# Loadings of the standardized covariates on the log therapeutic dose. BMI
# (column 0) carries the largest share so that BMI-driven logging is
# informative but not optimal.
_WARFARIN_LOADINGS = np.array([2.0, 1.0, 1.0, 0.5, 0.5])
_WARFARIN_LOADINGS = _WARFARIN_LOADINGS / np.linalg.norm(_WARFARIN_LOADINGS)
_WARFARIN_SIGNAL = 0.9


@dataclass(frozen=True, eq=False)
class WarfarinSim:
    contexts: np.ndarray
    t_star: np.ndarray
    mu_T: float
    sigma_T: float
    theta_mix: float

    @property
    def bmi_z(self) -> np.ndarray:
        return self.contexts[:, 0]

    @property
    def n(self) -> int:
        return self.contexts.shape[0]


@dataclass(frozen=True)
class WarfarinEnv:
    """Simulated patients with a lognormal therapeutic dose ``t*``.

    Contexts are five standardized covariates, the first being the BMI
    z-score. ``log t*`` is a noisy linear function of the covariates scaled so
    that ``t*`` has mean ``mu_T`` and standard deviation ``sigma_T``.
    """

    mu_T: float = 35.0
    sigma_T: float = 10.0
    theta_mix: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not self.sigma_T > 0:
            raise ValueError("sigma_T must be positive")
        if not 0.0 <= self.theta_mix <= 1.0:
            raise ValueError("theta_mix must lie in [0, 1]")

    @property
    def d(self) -> int:
        return _WARFARIN_LOADINGS.shape[0]

    def sample_hidden(self, n: int, rng: np.random.Generator):
        X = rng.standard_normal((n, self.d))
        m, s = lognormal_params(self.mu_T, self.sigma_T)
        u = _WARFARIN_SIGNAL * (X @ _WARFARIN_LOADINGS) + math.sqrt(1 - _WARFARIN_SIGNAL**2) * rng.standard_normal(n)
        return X, np.exp(m + s * u)

    def simulate(self, n: int, seed: Optional[int] = None) -> WarfarinSim:
        rng = np.random.default_rng(self.seed if seed is None else seed)
        X, t = self.sample_hidden(n, rng)
        return WarfarinSim(X, t, self.mu_T, self.sigma_T, self.theta_mix)

    def cost(self, a, hidden):
        return warfarin_cost(a, hidden)

    def logging_policy(self) -> PolicyModel:
        """The untruncated normal part of the logging policy as a linear policy."""
        beta = np.zeros(self.d)
        beta[0] = self.sigma_T * math.sqrt(self.theta_mix)
        mm = MeanModel("linear", self.d, np.concatenate([beta, [self.mu_T]]))
        return PolicyModel("normal", mm, math.log(self.sigma_T * math.sqrt(1 - self.theta_mix)))

    def to_dict(self) -> dict:
        return {"mu_T": self.mu_T, "sigma_T": self.sigma_T, "theta_mix": self.theta_mix, "seed": self.seed}


def warfarin_logging(sim: WarfarinSim, n: Optional[int] = None, seed: int = 0) -> LoggedDataset:
    """BMI-driven logging doses for the simulated patients.

    ``a = mu_T + sigma_T sqrt(theta) Z_BMI + sigma_T sqrt(1 - theta) eps``.
    Doses must be positive, so the normal is truncated at zero (redrawn) and
    the propensity is the truncated density; the truncation mass is tiny for
    the default parameters.
    """
    if sim.theta_mix >= 1.0:
        raise ValueError("theta_mix = 1 makes logging deterministic; its propensity is not a density")
    rows = sim.n if n is None else int(n)
    if not 1 <= rows <= sim.n:
        raise ValueError(f"n must lie in [1, {sim.n}]")
    rng = np.random.default_rng(seed)
    X = sim.contexts[:rows]
    loc = sim.mu_T + sim.sigma_T * math.sqrt(sim.theta_mix) * X[:, 0]
    scale = sim.sigma_T * math.sqrt(1.0 - sim.theta_mix)
    a = loc + scale * rng.standard_normal(rows)
    bad = a <= 0
    while np.any(bad):
        a[bad] = loc[bad] + scale * rng.standard_normal(int(bad.sum()))
        bad = a <= 0
    prop = norm.pdf((a - loc) / scale) / scale / norm.cdf(loc / scale)
    return LoggedDataset(X, a, prop, warfarin_cost(a, sim.t_star[:rows]))


# ---------------------------------------------------------------------------
# online evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OnlineEstimate:
    risk: float
    stderr: float

    @property
    def reward(self) -> float:
        return -self.risk


def online_risk(
    policy,
    env,
    n_contexts: int = 1000,
    samples_per_context: int = 100,
    seed: int = 0,
    contexts=None,
) -> OnlineEstimate:
    """Monte Carlo risk of ``policy`` in ``env``.

    Draws ``n_contexts`` fresh contexts with their hidden variables (or uses
    ``contexts=(X, hidden)``), samples ``samples_per_context`` actions for
    each, and averages the cost. The standard error is that of the mean of the
    per-context averages. ``policy`` only needs a ``sample(X, rng, size)``
    method.
    """
    rng = np.random.default_rng(seed)
    if contexts is None:
        X, hidden = env.sample_hidden(n_contexts, rng)
    else:
        X, hidden = contexts
        X = np.asarray(X, dtype=np.float64)
        hidden = np.asarray(hidden, dtype=np.float64)
    acts = policy.sample(X, rng, size=samples_per_context)
    costs = env.cost(acts, hidden[:, None])
    per_context = costs.mean(axis=1)
    n = per_context.shape[0]
    se = float(per_context.std(ddof=1) / math.sqrt(n)) if n > 1 else float(costs.std(ddof=1) / math.sqrt(costs.size))
    return OnlineEstimate(float(per_context.mean()), se)


# ---------------------------------------------------------------------------
# clipping toy
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClippingToy:
    dataset: LoggedDataset
    potentials: np.ndarray
    outlier_index: Optional[int]


TOY_LOGGING_MEAN = 1.5
TOY_LOGGING_STD = 0.5
TOY_OUTLIER_X = (0.6, 0.0)


def clipping_toy(n: int = 200, outlier: bool = True, seed: int = 0, noise_std: float = 1.0) -> ClippingToy:
    """Two clusters with low and high potentials and an optional outlier.

    Rewards are ``reward_piecewise(a, p) + eps`` with ``eps ~ N(0,
    noise_std^2)``; the logging policy is ``N(1.5, 0.5^2)`` for every context.
    The outlier sits at ``x = (0.6, 0)`` inside the low-potential cluster but
    has a high potential, an action 4.5 logging standard deviations below the
    logging mean (propensity about 3e-5) and a reward of ``1 + 3 noise_std``.
    """
    if n < 10:
        raise ValueError("the toy needs n >= 10")
    rng = np.random.default_rng(seed)
    n_regular = n - 1 if outlier else n
    X, g = make_blobs(
        n_samples=n_regular, centers=np.array([[0.5, 0.0], [0.5, 1.5]]), cluster_std=0.25, random_state=_sk_seed(rng)
    )
    p = np.where(g == 0, 1.0, 2.0) + 0.1 * rng.standard_normal(n_regular)
    a = TOY_LOGGING_MEAN + TOY_LOGGING_STD * rng.standard_normal(n_regular)
    r = reward_piecewise(a, p) + noise_std * rng.standard_normal(n_regular)
    idx = None
    if outlier:
        a_out = TOY_LOGGING_MEAN - 4.5 * TOY_LOGGING_STD
        X = np.vstack([X, TOY_OUTLIER_X])
        a = np.append(a, a_out)
        p = np.append(p, 2.0)
        r = np.append(r, 1.0 + 3.0 * noise_std)
        idx = n - 1
    prop = norm.pdf(a, TOY_LOGGING_MEAN, TOY_LOGGING_STD)
    return ClippingToy(LoggedDataset(X, a, prop, -r), p, idx)


def make_env(name: str, seed: int = 0, **overrides):
    """Environment by CLI name: the potential kinds or ``warfarin-sim``."""
    if name in ("warfarin", "warfarin-sim"):
        return WarfarinEnv(seed=seed, **overrides)
    return PotentialEnv(kind=name, seed=seed, **overrides)
