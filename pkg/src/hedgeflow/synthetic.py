"""Seeded synthetic market data for examples and tests."""

from __future__ import annotations

import datetime as dt
import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from hedgeflow.marketdata import CSV_HEADER, AssetClass, AssetId, Bar, NewsItem


def calendar(start: dt.date, end: dt.date, weekdays_only: bool = False) -> list[dt.date]:
    out = []
    d = start
    while d <= end:
        if not weekdays_only or d.weekday() < 5:
            out.append(d)
        d += dt.timedelta(days=1)
    return out


def bars_from_closes(dates: Sequence[dt.date], closes, rng: np.random.Generator, intraday: float = 0.004,
                     adj_factors=None, volume: float = 1e6) -> list[Bar]:
    """Wrap a close path in consistent OHLCV bars.

    Opens sit near the previous close and the high/low envelope adds a small
    random excursion, so the daily amplitude stays close to ``intraday``.
    """
    closes = np.asarray(closes, dtype=float)
    n = len(closes)
    gap = rng.normal(0.0, intraday / 4, n)
    up = np.abs(rng.normal(0.0, intraday / 2, n))
    down = np.abs(rng.normal(0.0, intraday / 2, n))
    vol = volume * np.exp(rng.normal(0.0, 0.2, n))
    adj = np.ones(n) if adj_factors is None else np.asarray(adj_factors, dtype=float)
    out = []
    for i, d in enumerate(dates):
        c = closes[i]
        o = (closes[i - 1] if i else c) * (1.0 + gap[i])
        h = max(o, c) * (1.0 + up[i])
        lo = min(o, c) * (1.0 - down[i])
        out.append(Bar(d, float(o), float(h), float(lo), float(c), float(c * adj[i]), float(round(vol[i]))))
    return out


def trending_closes(n: int, rng: np.random.Generator, start: float = 100.0, drift: float = 0.003,
                    vol: float = 0.01, regime: int = 0) -> np.ndarray:
    """Geometric walk with drift; ``regime`` > 0 flips the drift sign every ``regime`` steps."""
    mu = np.full(n, drift)
    if regime > 0:
        mu *= np.where((np.arange(n) // regime) % 2 == 0, 1.0, -1.0)
    r = mu + rng.normal(0.0, vol, n)
    r[0] = 0.0
    return start * np.exp(np.cumsum(r))


def mean_reverting_closes(n: int, rng: np.random.Generator, start: float = 100.0, kappa: float = 0.35,
                          vol: float = 0.01, trend: float = 0.0) -> np.ndarray:
    """Ornstein-Uhlenbeck log price around a (possibly drifting) level."""
    x = np.zeros(n)
    for i in range(1, n):
        x[i] = x[i - 1] - kappa * x[i - 1] + rng.normal(0.0, vol)
    return start * np.exp(x + trend * np.arange(n))


def dividend_factors(n: int, every: int = 63, cut: float = 0.005) -> np.ndarray:
    """Backward adjustment factors for a quarterly cash dividend."""
    f = np.ones(n)
    for ex in range(every, n, every):
        f[:ex] *= 1.0 - cut
    return f


def write_dataset(out_dir, bars: Mapping[AssetId, Sequence[Bar]], news: Iterable[NewsItem] = ()) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {}
    for asset, blist in sorted(bars.items()):
        meta[asset.symbol] = asset.asset_class.value
        with (out / f"{asset.symbol}.csv").open("w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(CSV_HEADER) + "\n")
            for b in blist:
                fh.write(f"{b.date.isoformat()},{b.open!r},{b.high!r},{b.low!r},{b.close!r},{b.adj_close!r},"
                         f"{b.volume!r}\n")
    (out / "assets.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    items = sorted(news, key=lambda n: (n.date, n.asset.symbol, n.headline))
    if items:
        with (out / "news.jsonl").open("w", encoding="utf-8") as fh:
            for n in items:
                fh.write(json.dumps({"date": n.date.isoformat(), "symbol": n.asset.symbol,
                                     "headline": n.headline}, sort_keys=True) + "\n")
    return out


_UP = ("{sym} extends gains as buyers return", "{sym} climbs on strong flows", "Analysts lift targets on {sym}")
_DOWN = ("{sym} slides as sellers dominate", "{sym} under pressure after weak data", "Risk-off mood weighs on {sym}")


def headlines(asset: AssetId, blist: Sequence[Bar], every: int = 7, lookback: int = 5) -> list[NewsItem]:
    """One headline every ``every`` bars, describing the trailing move (no look-ahead)."""
    out = []
    for i in range(lookback, len(blist), every):
        move = blist[i].close / blist[i - lookback].close - 1.0
        pool = _UP if move >= 0 else _DOWN
        out.append(NewsItem(blist[i].date, asset, pool[(i // every) % len(pool)].format(sym=asset.symbol)))
    return out


def sample_bars(seed: int = 7, start: dt.date = dt.date(2020, 1, 1),
                end: dt.date = dt.date(2021, 12, 31)) -> dict[AssetId, list[Bar]]:
    """Three assets, one per class: a daily crypto series and two weekday series."""
    rng = np.random.default_rng(seed)
    btc = AssetId("BTC", AssetClass.CRYPTO)
    dji = AssetId("DJI", AssetClass.EQUITY)
    fx = AssetId("EURUSD", AssetClass.FOREX)
    d_all = calendar(start, end)
    d_wk = calendar(start, end, weekdays_only=True)
    c_btc = trending_closes(len(d_all), rng, 9000.0, 0.0015, 0.03, regime=120)
    c_dji = trending_closes(len(d_wk), rng, 28000.0, 0.0004, 0.011, regime=160)
    c_fx = mean_reverting_closes(len(d_wk), rng, 1.12, 0.05, 0.004, trend=0.00005)
    return {
        btc: bars_from_closes(d_all, c_btc, rng, intraday=0.012, volume=3e4),
        dji: bars_from_closes(d_wk, c_dji, rng, intraday=0.008, adj_factors=dividend_factors(len(d_wk)),
                              volume=3e8),
        fx: bars_from_closes(d_wk, c_fx, rng, intraday=0.004, volume=1e9),
    }


def write_sample(out_dir, seed: int = 7) -> Path:
    bars = sample_bars(seed)
    news = [n for a, b in bars.items() for n in headlines(a, b)]
    return write_dataset(out_dir, bars, news)
