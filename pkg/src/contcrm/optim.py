"""Limited-memory BFGS and the proximal point outer loop."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

ValueGrad = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


class NonFiniteObjectiveError(FloatingPointError):
    """The objective or its gradient is not finite at the starting point."""

    def __init__(self, theta: np.ndarray, detail: str = ""):
        super().__init__(f"non-finite objective or gradient at theta={np.array2string(theta, precision=6)} {detail}".strip())
        self.theta = theta


@dataclass(frozen=True)
class LbfgsConfig:
    max_iter: int = 200
    gtol: float = 1e-6
    memory: int = 10
    c1: float = 1e-4
    max_backtracks: int = 40

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    n_iter: int
    n_eval: int
    status: str
    history: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _safe_eval(fun: ValueGrad, x: np.ndarray):
    try:
        with np.errstate(all="ignore"):
            f, g = fun(x)
    except (FloatingPointError, OverflowError, ValueError, ZeroDivisionError):
        return np.inf, None
    g = np.asarray(g, dtype=np.float64)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        return np.inf, None
    return float(f), g


def minimize(fun: ValueGrad, x0, config: LbfgsConfig = LbfgsConfig()) -> MinimizeResult:
    """Minimize a smooth function with L-BFGS and Armijo backtracking.

    ``fun`` returns ``(value, gradient)``. Trial points where the objective is
    not finite are treated as infinitely bad, so the line search simply backs
    off from them. Curvature pairs with ``s^T y <= 0`` are dropped. Accepted
    objective values never increase.
    """
    x = np.array(x0, dtype=np.float64)
    try:
        f, g = fun(x)
    except (FloatingPointError, OverflowError, ZeroDivisionError) as exc:
        raise NonFiniteObjectiveError(x, f"({exc})") from exc
    g = np.asarray(g, dtype=np.float64)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise NonFiniteObjectiveError(x)
    f = float(f)
    n_eval = 1
    S: list[np.ndarray] = []
    Y: list[np.ndarray] = []
    history = [f]
    status = "max_iter"
    it = 0
    for it in range(1, config.max_iter + 1):
        if np.linalg.norm(g, np.inf) <= config.gtol:
            status = "converged"
            it -= 1
            break
        # two-loop recursion
        q = g.copy()
        alphas = []
        for s, yv in zip(reversed(S), reversed(Y)):
            rho = 1.0 / (yv @ s)
            a = rho * (s @ q)
            alphas.append((rho, a))
            q -= a * yv
        if S:
            q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        else:
            q /= max(1.0, np.linalg.norm(g))
        for (s, yv), (rho, a) in zip(zip(S, Y), reversed(alphas)):
            b = rho * (yv @ q)
            q += (a - b) * s
        d = -q
        slope = g @ d
        if not slope < 0:
            # not a descent direction: restart from steepest descent
            S.clear()
            Y.clear()
            d = -g / max(1.0, np.linalg.norm(g))
            slope = g @ d
        step = 1.0
        accepted = False
        for _ in range(config.max_backtracks):
            x_new = x + step * d
            f_new, g_new = _safe_eval(fun, x_new)
            n_eval += 1
            if g_new is not None and f_new <= f + config.c1 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            status = "line_search_failed"
            break
        s = x_new - x
        yv = g_new - g
        if s @ yv > 1e-12 * (np.linalg.norm(s) * np.linalg.norm(yv) + 1e-300):
            S.append(s)
            Y.append(yv)
            if len(S) > config.memory:
                S.pop(0)
                Y.pop(0)
        x, f, g = x_new, f_new, g_new
        history.append(f)
    else:
        if np.linalg.norm(g, np.inf) <= config.gtol:
            status = "converged"
    return MinimizeResult(x, f, g, it, n_eval, status, history)


@dataclass(frozen=True)
class ProxConfig:
    """Proximal point settings: ``kappa`` and the number of outer steps.

    The last outer step always runs with ``kappa = 0``.
    """

    kappa: float = 0.1
    outer_iters: int = 10
    inner: LbfgsConfig = LbfgsConfig()
    seed: int = 0

    def __post_init__(self):
        if not self.kappa >= 0:
            raise ValueError("kappa must be nonnegative")
        if self.outer_iters < 1:
            raise ValueError("outer_iters must be at least 1")

    def to_dict(self) -> dict:
        return {"kappa": self.kappa, "outer_iters": self.outer_iters, "inner": self.inner.to_dict(), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ProxConfig":
        inner = LbfgsConfig(**d.get("inner", {}))
        return cls(float(d.get("kappa", 0.1)), int(d.get("outer_iters", 10)), inner, int(d.get("seed", 0)))


@dataclass
class TrainResult:
    theta: np.ndarray
    initial_objective: float
    trace: list[float]
    statuses: list[str]
    inner_iters: list[int]
    wall_time: float

    @property
    def final_objective(self) -> float:
        return self.trace[-1]

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "initial_objective": self.initial_objective,
            "trace": list(self.trace),
            "statuses": list(self.statuses),
            "inner_iters": list(self.inner_iters),
            "wall_time": self.wall_time,
        }


def proximal_minimize(fun: ValueGrad, theta0, cfg: ProxConfig) -> TrainResult:
    """Proximal point iterations on a generic objective.

    Step ``k`` approximately solves ``min L(theta) + kappa/2 |theta -
    theta_{k-1}|^2`` warm-started at ``theta_{k-1}``; the trace records the
    unregularized ``L(theta_k)``.
    """
    start = time.perf_counter()
    theta = np.array(theta0, dtype=np.float64)
    f0, _ = fun(theta)
    trace, statuses, iters = [], [], []
    for k in range(cfg.outer_iters):
        kappa = cfg.kappa if k < cfg.outer_iters - 1 else 0.0
        if kappa > 0:
            center = theta.copy()

            def sub(t, center=center, kappa=kappa):
                v, g = fun(t)
                diff = t - center
                return v + 0.5 * kappa * float(diff @ diff), g + kappa * diff

        else:
            sub = fun
        res = minimize(sub, theta, cfg.inner)
        theta = res.x
        trace.append(float(fun(theta)[0]) if kappa > 0 else res.fun)
        statuses.append(res.status)
        iters.append(res.n_iter)
    return TrainResult(theta, float(f0), trace, statuses, iters, time.perf_counter() - start)


def proximal_train(pm0, ds, objective, cfg: ProxConfig) -> TrainResult:
    """Train a policy on logged data with the proximal point method."""
    from .estimators import objective_value_grad

    def fun(theta):
        return objective_value_grad(pm0.with_theta(theta), ds, objective)

    return proximal_minimize(fun, pm0.theta, cfg)
