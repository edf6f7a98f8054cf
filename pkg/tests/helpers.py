from __future__ import annotations

import datetime as dt
from pathlib import Path

import hedgeflow
from hedgeflow.marketdata import AssetClass, AssetId, Bar, Dataset, NewsItem

SAMPLE_DIR = Path(hedgeflow.__file__).parent / "fixtures" / "sample"
DATA_DIR = Path(__file__).parent / "data"

BTC = AssetId("BTC", AssetClass.CRYPTO)
DJI = AssetId("DJI", AssetClass.EQUITY)
FX = AssetId("EURUSD", AssetClass.FOREX)


def days(start: dt.date, n: int) -> list[dt.date]:
    return [start + dt.timedelta(i) for i in range(n)]


def bars_from(closes, start=dt.date(2021, 1, 1), spread=0.0, dates=None, adj=None) -> list[Bar]:
    """Bars that open at the previous close, with an optional symmetric high/low spread."""
    dates = dates or days(start, len(closes))
    out = []
    for i, (d, c) in enumerate(zip(dates, closes)):
        o = closes[i - 1] if i else c
        hi = max(o, c) * (1 + spread)
        lo = min(o, c) * (1 - spread)
        out.append(Bar(d, float(o), float(hi), float(lo), float(c), float(c if adj is None else adj[i]), 1000.0))
    return out


def dataset(series: dict[AssetId, list[Bar]], news=(), **kw) -> Dataset:
    return Dataset(series, news, **kw)


def headline(asset: AssetId, date: dt.date, text: str) -> NewsItem:
    return NewsItem(date, asset, text)


ACCEPTANCE_LINES: list[str] = []
