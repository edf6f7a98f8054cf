"""Performance, risk and diversity metrics over an equity curve."""

from __future__ import annotations

import datetime as dt
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from hedgeflow.errors import MetricError

TRADING_DAYS = 252
CALENDAR_DAYS = 365
EIGEN_FLOOR = 1e-12


def _curve(values) -> np.ndarray:
    v = np.asarray(values, dtype=float).reshape(-1)
    if len(v) < 2:
        raise MetricError("total_return", "need at least two equity values")
    if np.any(v <= 0):
        raise MetricError("total_return", "equity values must be positive")
    return v


def total_return(values) -> float:
    v = _curve(values)
    return float(v[-1] / v[0] - 1.0)


def daily_returns(values) -> np.ndarray:
    v = _curve(values)
    return v[1:] / v[:-1] - 1.0


def annual_return_rate(tr: float, span_years: float) -> float:
    """Geometric annualisation of a total return over ``span_years``."""
    if span_years <= 0:
        raise MetricError("arr", "span must be positive")
    if tr <= -1:
        raise MetricError("arr", "total return must exceed -100%")
    return (1.0 + tr) ** (1.0 / span_years) - 1.0


def span_years(start: dt.date, end: dt.date) -> float:
    return (end - start).days / CALENDAR_DAYS


def sharpe(returns, risk_free: float = 0.0) -> float:
    r = np.asarray(returns, dtype=float)
    if len(r) < 2:
        raise MetricError("sharpe", "need at least two returns")
    if np.all(r == r[0]):
        raise MetricError("sharpe", "zero variance")
    sd = r.std(ddof=1)
    return float((r.mean() - risk_free / TRADING_DAYS) / sd * math.sqrt(TRADING_DAYS))


def downside_deviation(returns, risk_free: float = 0.0) -> float:
    """Root mean square of the shortfall below the daily risk-free rate, over all periods."""
    ex = np.asarray(returns, dtype=float) - risk_free / TRADING_DAYS
    return float(np.sqrt(np.mean(np.minimum(ex, 0.0) ** 2)))


def sortino(returns, risk_free: float = 0.0) -> float:
    r = np.asarray(returns, dtype=float)
    if len(r) == 0:
        raise MetricError("sortino", "no returns")
    ex = r - risk_free / TRADING_DAYS
    if not np.any(ex < 0):
        raise MetricError("sortino", "no negative excess returns")
    return float(ex.mean() / downside_deviation(r, risk_free) * math.sqrt(TRADING_DAYS))


def max_drawdown(values) -> float:
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return 0.0
    peak = np.maximum.accumulate(v)
    return float(np.max((peak - v) / peak))


def calmar(arr: float, mdd: float) -> float:
    if mdd <= 0:
        raise MetricError("calmar", "maximum drawdown is zero")
    return arr / mdd


def volatility(returns) -> float:
    """Sample standard deviation of daily returns (not annualised)."""
    r = np.asarray(returns, dtype=float)
    if len(r) < 2:
        raise MetricError("volatility", "need at least two returns")
    return 0.0 if np.all(r == r[0]) else float(r.std(ddof=1))


def _normalise(w) -> np.ndarray | None:
    w = np.clip(np.asarray(w, dtype=float), 0.0, None)
    s = w.sum()
    return None if s <= 0 else w / s


def entropy(weight_history: Sequence[Sequence[float]]) -> float:
    """Time-averaged Shannon entropy of per-asset value weights.

    Rows are per-day asset weights with cash excluded; each row is
    renormalised and rows with no holdings are skipped.
    """
    vals = []
    for row in weight_history:
        w = _normalise(row)
        if w is None:
            continue
        nz = w[w > 0]
        vals.append(float(-(nz * np.log(nz)).sum()))
    return float(np.mean(vals)) if vals else 0.0


def enb_from_cov(weights, cov) -> float:
    """Effective number of bets of ``weights`` under ``cov`` via principal portfolios."""
    w = _normalise(weights)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if w is None:
        raise MetricError("enb", "no holdings")
    sym = (cov + cov.T) / 2
    lam, vec = np.linalg.eigh(sym)
    lam = np.maximum(lam, EIGEN_FLOOR)
    pp = vec.T @ w
    contrib = pp ** 2 * lam
    total = contrib.sum()
    if total <= 0:
        raise MetricError("enb", "zero portfolio variance")
    p = contrib / total
    p = p[p > 0]
    return float(np.exp(-(p * np.log(p)).sum()))


def effective_bets(weight_history, return_history, dates: Sequence[dt.date] | None = None,
                   cycle_days: int = 30) -> float:
    """ENB averaged over allocation cycles.

    Within each cycle the average renormalised weights and the sample
    covariance of the cycle's asset returns define one ENB value. Cycles with
    no holdings, fewer than two returns or zero portfolio variance are skipped.
    """
    W = np.asarray(weight_history, dtype=float)
    R = np.asarray(return_history, dtype=float)
    if W.ndim == 1:
        W = W.reshape(-1, 1)
        R = R.reshape(-1, 1)
    if W.shape != R.shape:
        raise MetricError("enb", f"weight history {W.shape} and return history {R.shape} differ")
    if W.shape[1] == 1:
        return 1.0 if np.any(W > 0) else 0.0
    if dates is None:
        segments = [np.arange(len(W))]
    else:
        start = dates[0]
        keys = np.array([(d - start).days // cycle_days for d in dates])
        segments = [np.flatnonzero(keys == k) for k in np.unique(keys)]
    vals = []
    for idx in segments:
        rows = [r for r in (_normalise(W[i]) for i in idx) if r is not None]
        if not rows or len(idx) < 2:
            continue
        wbar = np.mean(rows, axis=0)
        cov = np.cov(R[idx], rowvar=False, ddof=1)
        try:
            vals.append(enb_from_cov(wbar, cov))
        except MetricError:
            continue
    return float(np.mean(vals)) if vals else 0.0


@dataclass
class MetricsReport:
    tr: float
    arr: float
    sr: float | None
    cr: float | None
    sor: float | None
    mdd: float
    vol: float | None
    ent: float
    enb: float
    span_years: float
    n_days: int

    def to_json(self) -> dict:
        out = asdict(self)
        out["conventions"] = {
            "arr": "geometric, span = calendar days / 365",
            "sr_sor_annualisation": f"sqrt({TRADING_DAYS})",
            "vol": "daily sample standard deviation, not annualised",
            "risk_free": 0.0,
            "ent": "time-averaged Shannon entropy of per-asset value weights, cash excluded",
            "enb": "principal-portfolio effective number of bets, averaged per allocation cycle",
        }
        return out


def _safe(fn, *args):
    try:
        return fn(*args)
    except MetricError:
        return None


def compute_report(dates: Sequence[dt.date], values, weight_history, asset_returns,
                   risk_free: float = 0.0, cycle_days: int = 30) -> MetricsReport:
    """All nine metrics for one run. Ratios that are undefined come back as None."""
    tr = total_return(values)
    span = span_years(dates[0], dates[-1])
    arr = annual_return_rate(tr, span) if span > 0 else 0.0
    r = daily_returns(values)
    mdd = max_drawdown(values)
    return MetricsReport(
        tr=tr,
        arr=arr,
        sr=_safe(sharpe, r, risk_free),
        cr=_safe(calmar, arr, mdd),
        sor=_safe(sortino, r, risk_free),
        mdd=mdd,
        vol=_safe(volatility, r),
        ent=entropy(weight_history),
        enb=effective_bets(weight_history, asset_returns, list(dates), cycle_days),
        span_years=span,
        n_days=len(values),
    )
