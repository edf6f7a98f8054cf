"""Budget allocation across asset classes.

The objective is

    f(w) = rho . w  -  lambda1 * sqrt(w' C w)  -  lambda2 * CVaR_alpha(history @ w)

maximised over the probability simplex. All three terms are concave in w, so
projected subgradient ascent finds the global optimum up to step-size error;
a 0.01 simplex grid scan (dimension <= 4) and a pairwise pattern search
tighten the result.
"""

from __future__ import annotations

import functools
import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from hedgeflow.errors import (
    ConvergenceError,
    DimensionMismatchError,
    InsufficientHistoryError,
    PSDViolationError,
)
from hedgeflow.marketdata import ReturnSeries

log = logging.getLogger(__name__)

MIN_SAMPLES = 20


@dataclass(frozen=True)
class AllocationProblem:
    rho: np.ndarray
    cov: np.ndarray
    history: np.ndarray
    lambda1: float = 1.0
    lambda2: float = 1.0
    alpha: float = 0.95

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        hist = np.asarray(self.history, dtype=float)
        if hist.ndim == 1:
            hist = hist.reshape(-1, 1)
        n = len(rho)
        if cov.shape != (n, n):
            raise DimensionMismatchError(f"cov shape {cov.shape} does not match {n} assets")
        if hist.ndim != 2 or hist.shape[1] != n or hist.shape[0] < 1:
            raise DimensionMismatchError(f"history shape {hist.shape} does not match {n} assets")
        if not np.allclose(cov, cov.T, atol=1e-8, rtol=0):
            raise PSDViolationError("covariance matrix is not symmetric")
        if n and np.linalg.eigvalsh((cov + cov.T) / 2).min() < -1e-8:
            raise PSDViolationError("covariance matrix is not positive semidefinite")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("risk-aversion coefficients must be non-negative")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not (np.all(np.isfinite(rho)) and np.all(np.isfinite(cov)) and np.all(np.isfinite(hist))):
            raise ValueError("allocation inputs must be finite")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "history", hist)

    @property
    def n(self) -> int:
        return len(self.rho)


@dataclass(frozen=True)
class Weights:
    omega: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.omega, dtype=float).reshape(-1)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must be non-negative and sum to 1, got {w}")
        object.__setattr__(self, "omega", w)

    @classmethod
    def uniform(cls, n: int) -> "Weights":
        return cls(np.full(n, 1.0 / n))

    def tolist(self) -> list[float]:
        return [float(x) for x in self.omega]


def expected_total_return(omega, rho) -> float:
    omega = np.asarray(omega, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if omega.shape != rho.shape:
        raise DimensionMismatchError(f"omega {omega.shape} vs rho {rho.shape}")
    return float(omega @ rho)


def portfolio_risk(omega, cov) -> float:
    omega = np.asarray(omega, dtype=float)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape != (len(omega), len(omega)):
        raise DimensionMismatchError(f"omega length {len(omega)} vs cov {cov.shape}")
    q = float(omega @ cov @ omega)
    if q < -1e-10:
        raise PSDViolationError(f"negative portfolio variance {q}")
    return math.sqrt(max(q, 0.0))


def tail_size(n: int, alpha: float) -> int:
    """Number of worst samples averaged by CVaR: floor((1 - alpha) n), at least one."""
    return max(1, int(math.floor((1.0 - alpha) * n + 1e-9)))


def _check_samples(returns, alpha: float, min_samples: int) -> np.ndarray:
    r = np.asarray(returns, dtype=float).reshape(-1)
    if len(r) < min_samples:
        raise InsufficientHistoryError(f"need at least {min_samples} return samples, got {len(r)}")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return r


def var_historical(returns, alpha: float = 0.95, min_samples: int = MIN_SAMPLES) -> float:
    """Historical VaR as a loss: the ceil(alpha n)-th smallest loss (1-based)."""
    losses = np.sort(-_check_samples(returns, alpha, min_samples))
    idx = int(math.ceil(alpha * len(losses) - 1e-9))
    return float(losses[min(max(idx, 1), len(losses)) - 1])


def _cvar(losses: np.ndarray, alpha: float) -> float:
    m = tail_size(len(losses), alpha)
    tail = np.partition(losses, len(losses) - m)[len(losses) - m:]
    return math.fsum(tail.tolist()) / m


def cvar_historical(returns, alpha: float = 0.95, min_samples: int = MIN_SAMPLES) -> float:
    """Historical CVaR as a loss: mean of the worst floor((1-alpha) n) losses."""
    return _cvar(-_check_samples(returns, alpha, min_samples), alpha)


def objective_terms(omega, problem: AllocationProblem) -> tuple[float, float, float, float]:
    """(objective, I_etr, I_pr, I_cvar) at ``omega``."""
    etr = expected_total_return(omega, problem.rho)
    pr = portfolio_risk(omega, problem.cov)
    cv = _cvar(-(problem.history @ omega), problem.alpha)
    return etr - problem.lambda1 * pr - problem.lambda2 * cv, etr, pr, cv


def objective(omega, problem: AllocationProblem) -> float:
    return objective_terms(omega, problem)[0]


def _supergradient(omega: np.ndarray, p: AllocationProblem) -> np.ndarray:
    g = p.rho.copy()
    if p.lambda1:
        cw = p.cov @ omega
        var = float(omega @ cw)
        if var > 1e-18:
            g -= p.lambda1 * cw / math.sqrt(var)
    if p.lambda2:
        losses = -(p.history @ omega)
        m = tail_size(len(losses), p.alpha)
        order = np.argsort(-losses, kind="stable")
        cut = losses[order[m - 1]]
        eps = 1e-12 * max(1.0, abs(cut))
        strict = losses > cut + eps
        tied = np.abs(losses - cut) <= eps
        k = int(strict.sum())
        # tied tail samples are averaged to avoid flip-flopping at kinks
        dcvar = -p.history[strict].sum(axis=0)
        if m > k:
            dcvar = dcvar - (m - k) * p.history[tied].mean(axis=0)
        g -= p.lambda2 * dcvar / m
    return g


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto {w >= 0, sum w = 1}."""
    v = np.asarray(v, dtype=float)
    n = len(v)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.nonzero(u - css / np.arange(1, n + 1) > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    w = np.maximum(v - theta, 0.0)
    return w / w.sum()


@functools.lru_cache(maxsize=8)
def simplex_grid(n: int, step: float = 0.01) -> np.ndarray:
    """All points of the simplex whose coordinates are multiples of ``step``."""
    k = int(round(1.0 / step))
    rows = []
    for c in itertools.combinations(range(k + n - 1), n - 1):
        parts = np.diff((-1,) + c + (k + n - 1,)) - 1
        rows.append(parts)
    grid = np.asarray(rows, dtype=float) / k
    grid.setflags(write=False)
    return grid


def _grid_objective(grid: np.ndarray, p: AllocationProblem) -> np.ndarray:
    etr = grid @ p.rho
    pr = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", grid, p.cov, grid), 0.0))
    losses = -(grid @ p.history.T)
    m = tail_size(p.history.shape[0], p.alpha)
    tail = np.partition(losses, losses.shape[1] - m, axis=1)[:, losses.shape[1] - m:]
    return etr - p.lambda1 * pr - p.lambda2 * tail.mean(axis=1)


@dataclass
class AllocationResult:
    weights: Weights
    objective: float
    i_etr: float
    i_pr: float
    i_cvar: float
    method: str
    trace: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"weights": self.weights.tolist(), "objective": self.objective,
                "i_etr": self.i_etr, "i_pr": self.i_pr, "i_cvar": self.i_cvar}


def solve(problem: AllocationProblem, max_iter: int = 500, grid_step: float = 0.01,
          grid_max_dim: int = 4, min_step: float = 1e-11) -> AllocationResult:
    n = problem.n
    if n == 1:
        w = np.ones(1)
        f, etr, pr, cv = objective_terms(w, problem)
        return AllocationResult(Weights(w), f, etr, pr, cv, "trivial", [f])

    def f(w):
        return objective(w, problem)

    best = np.full(n, 1.0 / n)
    best_f = f(best)
    trace = [best_f]
    w = best.copy()
    method = "pga"
    for k in range(max_iter):
        g = _supergradient(w, problem)
        # drop the component that only shifts mass uniformly; projection ignores it anyway
        g = g - g.mean()
        gn = np.linalg.norm(g)
        if gn < 1e-15:
            break
        w = project_simplex(w + (0.5 / math.sqrt(k + 1.0)) * g / gn)
        fw = f(w)
        if _better(fw, best_f):
            best, best_f = w.copy(), fw
        trace.append(best_f)

    if n <= grid_max_dim:
        grid = simplex_grid(n, grid_step)
        vals = _grid_objective(grid, problem)
        i = int(np.argmax(vals))
        if _better(vals[i], best_f):
            gw = grid[i]
            gf = f(gw)
            if _better(gf, best_f):
                best, best_f, method = gw.copy(), gf, "grid"
        trace.append(best_f)

    best, best_f = _pattern_search(best, best_f, f, 0.05, min_step)
    trace.append(best_f)

    if not np.isfinite(best_f) or np.any(~np.isfinite(best)):
        raise ConvergenceError("allocation objective is not finite", best, trace)
    best = np.maximum(best, 0.0)
    best = best / best.sum()
    fv, etr, pr, cv = objective_terms(best, problem)
    return AllocationResult(Weights(best), fv, etr, pr, cv, method, trace)


def _better(new: float, old: float) -> bool:
    # rounding-level gains are ignored so flat objectives keep the uniform start
    return new > old + 1e-14 * max(1.0, abs(old))


def _pattern_search(w, fw, f, step, min_step):
    n = len(w)
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    while step > min_step:
        improved = True
        while improved:
            improved = False
            for i, j in pairs:
                move = min(step, w[j])
                if move <= 0:
                    continue
                cand = w.copy()
                cand[i] += move
                cand[j] -= move
                fc = f(cand)
                if _better(fc, fw):
                    w, fw, improved = cand, fc, True
        step /= 2
    return w, fw


def optimize(problem: AllocationProblem, **kwargs) -> Weights:
    """Budget weights maximising the allocation objective over the simplex."""
    return solve(problem, **kwargs).weights


def estimate_inputs(series: Sequence[ReturnSeries], window: int = 60, cycle: int = 30,
                    min_window: int = MIN_SAMPLES):
    """(rho, cov, history) from the trailing ``window`` jointly observed returns.

    ``rho`` is the trailing mean daily return scaled to one ``cycle``.
    """
    if not series:
        raise InsufficientHistoryError("no return series given")
    common = set(series[0].dates)
    for s in series[1:]:
        common &= set(s.dates)
    dates = sorted(common)
    if len(dates) < min_window or window < min_window:
        raise InsufficientHistoryError(
            f"need at least {min_window} jointly observed returns, have {len(dates)}")
    use = dates[-window:]
    cols = []
    for s in series:
        pos = {d: i for i, d in enumerate(s.dates)}
        cols.append([s.returns[pos[d]] for d in use])
    history = np.asarray(cols, dtype=float).T
    rho = history.mean(axis=0) * cycle
    cov = np.atleast_2d(np.cov(history, rowvar=False, ddof=1))
    return rho, cov, history
