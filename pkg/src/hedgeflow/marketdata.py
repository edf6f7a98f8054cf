"""Daily market data: bars, news, calendars, amplitudes and gated snapshots."""

from __future__ import annotations

import bisect
import csv
import datetime as dt
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from hedgeflow import indicators as ind
from hedgeflow.errors import (
    BarValidationError,
    DataParseError,
    HedgeflowError,
    InsufficientHistoryError,
)

log = logging.getLogger(__name__)

CSV_HEADER = ["date", "open", "high", "low", "close", "adj_close", "volume"]

DEFAULT_INDICATORS = (
    "sma_20", "ema_20", "rsi_14", "macd", "atr_14", "bb_20",
    "mom_10", "roc_10", "vol_20", "obv", "zscore_20", "roc_252",
)

DAILY_AMPLITUDE_THRESHOLD = 0.05
THREE_DAY_AMPLITUDE_THRESHOLD = 0.10


class AssetClass(str, Enum):
    CRYPTO = "Crypto"
    EQUITY = "Equity"
    FOREX = "Forex"


@dataclass(frozen=True, order=True)
class AssetId:
    symbol: str
    asset_class: AssetClass

    def __post_init__(self):
        if not self.symbol:
            raise ValueError("asset symbol must be non-empty")


@dataclass(frozen=True)
class Bar:
    date: dt.date
    open: float
    high: float
    low: float
    close: float
    adj_close: float
    volume: float

    def problems(self) -> list[str]:
        out = []
        for name in ("open", "high", "low", "close", "adj_close"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be > 0 (got {getattr(self, name)})")
        if self.volume < 0:
            out.append(f"volume must be >= 0 (got {self.volume})")
        if self.low > self.high:
            out.append(f"low {self.low} > high {self.high}")
        if self.low > min(self.open, self.close):
            out.append(f"low {self.low} above min(open, close)")
        if self.high < max(self.open, self.close):
            out.append(f"high {self.high} below max(open, close)")
        return out

    def validate(self) -> "Bar":
        issues = self.problems()
        if issues:
            raise BarValidationError(self.date, "; ".join(issues))
        return self

    def adjusted(self) -> "Bar":
        """OHLC rescaled onto the adjusted-close basis."""
        f = self.adj_close / self.close
        if f == 1.0:
            return self
        return Bar(self.date, self.open * f, self.high * f, self.low * f, self.adj_close,
                   self.adj_close, self.volume)


@dataclass(frozen=True)
class NewsItem:
    date: dt.date
    asset: AssetId
    headline: str

    def __post_init__(self):
        if not self.headline.strip():
            raise ValueError("headline must be non-empty")


@dataclass(frozen=True)
class ReturnSeries:
    asset: AssetId
    dates: tuple[dt.date, ...]
    returns: np.ndarray

    def __len__(self):
        return len(self.returns)


def parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


def scan_ohlcv(path, asset: AssetId | None = None) -> tuple[list[Bar], list[str]]:
    """Parse an OHLCV file, collecting invariant violations instead of raising on them.

    Malformed rows still raise :class:`DataParseError`. Returned bars are sorted
    ascending; rows that violate bar invariants are excluded.
    """
    path = Path(path)
    bars: dict[dt.date, Bar] = {}
    issues: list[str] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise DataParseError(path, 1, f"header must be {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(CSV_HEADER):
                raise DataParseError(path, lineno, f"expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                date = parse_date(row[0])
                o, h, lo, c, ac, v = (float(x) for x in row[1:])
            except ValueError as exc:
                raise DataParseError(path, lineno, str(exc)) from None
            if date in bars:
                raise DataParseError(path, lineno, f"duplicate date {date}")
            bar = Bar(date, o, h, lo, c, ac, v)
            problems = bar.problems()
            if problems:
                issues.append(f"{date}: {'; '.join(problems)}")
                continue
            bars[date] = bar
    return [bars[d] for d in sorted(bars)], issues


def load_ohlcv(path, asset: AssetId | None = None) -> list[Bar]:
    """Load and validate a daily OHLCV CSV; output is ascending by date."""
    bars, issues = scan_ohlcv(path, asset)
    if issues:
        date, _, msg = issues[0].partition(": ")
        raise BarValidationError(date, msg)
    return bars


def load_news(path, assets: dict[str, AssetId]) -> list[NewsItem]:
    path = Path(path)
    items = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                asset = assets[obj["symbol"]]
                items.append(NewsItem(parse_date(obj["date"]), asset, obj["headline"]))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataParseError(path, lineno, f"bad news record: {exc}") from None
    items.sort(key=lambda n: (n.date, n.asset.symbol))
    return items


def _need(bars: Sequence[Bar], n: int, what: str):
    if len(bars) < n:
        raise InsufficientHistoryError(f"{what} needs at least {n} bars, got {len(bars)}")


def daily_amplitude(bars: Sequence[Bar], mode: str = "range") -> float:
    """Amplitude of the last bar in ``bars``.

    ``mode="range"`` is (high - low) / previous close; ``mode="close"`` is the
    absolute close-to-close change.
    """
    _need(bars, 2, "daily amplitude")
    prev, cur = bars[-2], bars[-1]
    if mode == "range":
        return (cur.high - cur.low) / prev.close
    if mode == "close":
        return abs(cur.close / prev.close - 1.0)
    raise ValueError(f"unknown amplitude mode {mode!r}")


def cumulative_amplitude_3d(bars: Sequence[Bar]) -> float:
    _need(bars, 4, "three-day amplitude")
    return abs(bars[-1].close / bars[-4].close - 1.0)


def signed_move_3d(bars: Sequence[Bar]) -> float:
    _need(bars, 4, "three-day move")
    return bars[-1].close / bars[-4].close - 1.0


def reference_prices(bars: Sequence[Bar], asset_class: AssetClass) -> np.ndarray:
    """Adjusted close for equities, raw close otherwise."""
    if asset_class is AssetClass.EQUITY:
        return np.array([b.adj_close for b in bars], dtype=float)
    return np.array([b.close for b in bars], dtype=float)


def returns_from_bars(asset: AssetId, bars: Sequence[Bar]) -> ReturnSeries:
    px = reference_prices(bars, asset.asset_class)
    r = px[1:] / px[:-1] - 1.0 if len(px) > 1 else np.zeros(0)
    return ReturnSeries(asset, tuple(b.date for b in bars[1:]), r)


@dataclass(frozen=True)
class MarketSnapshot:
    """Everything observable at the close of ``date``.

    ``bars``, ``indicators``, ``tools`` and ``news`` only cover assets with a
    bar on ``date``. ``marks`` carries the latest reference price (and its
    date) for every asset that has started trading, for valuation.
    """

    date: dt.date
    bars: dict[str, Bar]
    indicators: dict[str, dict[str, float]]
    tools: dict[str, dict[str, float]]
    news: dict[str, list[NewsItem]]
    marks: dict[str, tuple[dt.date, float]]

    def tradable(self, symbol: str) -> bool:
        return symbol in self.bars


@dataclass
class _AssetData:
    asset: AssetId
    bars: list[Bar]
    dates: list[dt.date]
    ref: np.ndarray
    series: dict[str, np.ndarray] = field(default_factory=dict)


class Dataset:
    """Read-only collection of per-asset bars and news."""

    def __init__(self, bars: dict[AssetId, list[Bar]], news: Iterable[NewsItem] = (),
                 indicator_names: Sequence[str] = DEFAULT_INDICATORS,
                 amplitude_mode: str = "range"):
        for name in indicator_names:
            ind.parse_name(name)
        self.indicator_names = tuple(indicator_names)
        self.amplitude_mode = amplitude_mode
        self._data: dict[str, _AssetData] = {}
        for asset in sorted(bars, key=lambda a: a.symbol):
            if asset.symbol in self._data:
                raise HedgeflowError(f"duplicate symbol {asset.symbol}")
            blist = sorted(bars[asset], key=lambda b: b.date)
            self._data[asset.symbol] = _AssetData(
                asset, blist, [b.date for b in blist], reference_prices(blist, asset.asset_class))
        self._news: dict[tuple[str, dt.date], list[NewsItem]] = {}
        for item in news:
            if item.asset.symbol not in self._data:
                continue
            self._news.setdefault((item.asset.symbol, item.date), []).append(item)
        self.calendar: list[dt.date] = sorted({d for a in self._data.values() for d in a.dates})

    @classmethod
    def from_dir(cls, data_dir, **kwargs) -> "Dataset":
        data_dir = Path(data_dir)
        assets = discover_assets(data_dir)
        bars = {a: load_ohlcv(data_dir / f"{a.symbol}.csv", a) for a in assets}
        news_path = data_dir / "news.jsonl"
        news = load_news(news_path, {a.symbol: a for a in assets}) if news_path.exists() else []
        return cls(bars, news, **kwargs)

    @property
    def assets(self) -> list[AssetId]:
        return [d.asset for d in self._data.values()]

    def asset(self, symbol: str) -> AssetId:
        return self._data[symbol].asset

    def bars(self, symbol: str, until: dt.date | None = None) -> list[Bar]:
        d = self._data[symbol]
        if until is None:
            return list(d.bars)
        return d.bars[:bisect.bisect_right(d.dates, until)]

    def adjusted_bars(self, symbol: str, until: dt.date | None = None) -> list[Bar]:
        bars = self.bars(symbol, until)
        if self._data[symbol].asset.asset_class is AssetClass.EQUITY:
            return [b.adjusted() for b in bars]
        return bars

    def has_bar(self, symbol: str, date: dt.date) -> bool:
        d = self._data[symbol]
        i = bisect.bisect_left(d.dates, date)
        return i < len(d.dates) and d.dates[i] == date

    def news(self, symbol: str, date: dt.date) -> list[NewsItem]:
        return list(self._news.get((symbol, date), ()))

    def returns(self, symbol: str, until: dt.date | None = None) -> ReturnSeries:
        d = self._data[symbol]
        return returns_from_bars(d.asset, self.bars(symbol, until))

    def mark(self, symbol: str, date: dt.date) -> tuple[dt.date, float] | None:
        """Latest (date, reference price) at or before ``date``."""
        d = self._data[symbol]
        i = bisect.bisect_right(d.dates, date) - 1
        if i < 0:
            return None
        return d.dates[i], float(d.ref[i])

    def _series(self, symbol: str) -> dict[str, np.ndarray]:
        d = self._data[symbol]
        if not d.series:
            arrays = ind.bar_arrays(self.adjusted_bars(symbol))
            for name in self.indicator_names:
                d.series.update(ind.compute_series(name, *arrays))
        return d.series

    def trading_date(self, date: dt.date) -> dt.date:
        """Most recent calendar date <= ``date`` on which any asset traded."""
        i = bisect.bisect_right(self.calendar, date) - 1
        if i < 0:
            first = self.calendar[0] if self.calendar else None
            raise HedgeflowError(f"{date} precedes the first bar ({first})")
        return self.calendar[i]

    def snapshot(self, date: dt.date) -> MarketSnapshot:
        day = self.trading_date(date)
        bars, inds, tools, news, marks = {}, {}, {}, {}, {}
        for symbol, d in self._data.items():
            m = self.mark(symbol, day)
            if m is None:
                continue
            marks[symbol] = m
            i = bisect.bisect_left(d.dates, day)
            if i >= len(d.dates) or d.dates[i] != day:
                continue
            bars[symbol] = d.bars[i]
            inds[symbol] = {k: float(s[i]) for k, s in self._series(symbol).items() if not np.isnan(s[i])}
            window = d.bars[max(0, i - 3):i + 1]
            t = {}
            if len(window) >= 2:
                t["daily_amplitude"] = daily_amplitude(window, self.amplitude_mode)
                t["return_1d"] = float(d.ref[i] / d.ref[i - 1] - 1.0)
            if len(window) >= 4:
                t["amplitude_3d"] = cumulative_amplitude_3d(window)
                t["move_3d"] = signed_move_3d(window)
            tools[symbol] = t
            news[symbol] = self.news(symbol, day)
        return MarketSnapshot(day, bars, inds, tools, news, marks)


def discover_assets(data_dir) -> list[AssetId]:
    """Read ``assets.json`` (symbol -> asset class); without it every CSV is an equity."""
    data_dir = Path(data_dir)
    manifest = data_dir / "assets.json"
    if manifest.exists():
        raw = json.loads(manifest.read_text(encoding="utf-8"))
        return [AssetId(sym, AssetClass(cls)) for sym, cls in sorted(raw.items())]
    return [AssetId(p.stem, AssetClass.EQUITY) for p in sorted(data_dir.glob("*.csv"))]
