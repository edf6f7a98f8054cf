"""Technical indicators over daily bars.

Every function here returns a full-length numpy array aligned with its input,
with NaN wherever the lookback is not yet satisfied. Values at index t depend
only on inputs at indices <= t, so slicing the input never changes earlier
outputs.
"""

from __future__ import annotations

import re
from typing import Sequence

import numpy as np

from hedgeflow.errors import UnknownIndicatorError


def sma(x: np.ndarray, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.full(x.shape, np.nan)
    if n <= 0 or len(x) < n:
        return out
    out[n - 1:] = np.lib.stride_tricks.sliding_window_view(x, n).mean(axis=1)
    return out


def ema(x: np.ndarray, n: int) -> np.ndarray:
    """EMA with smoothing 2/(n+1), seeded by the SMA of the first n valid values.

    Leading NaNs in ``x`` are skipped, which lets MACD feed its own line in.
    """
    x = np.asarray(x, dtype=float)
    out = np.full(x.shape, np.nan)
    valid = np.flatnonzero(~np.isnan(x))
    if len(valid) < n:
        return out
    start = valid[0]
    seed_at = start + n - 1
    a = 2.0 / (n + 1)
    prev = float(np.mean(x[start:seed_at + 1]))
    out[seed_at] = prev
    for t in range(seed_at + 1, len(x)):
        prev = a * x[t] + (1.0 - a) * prev
        out[t] = prev
    return out


def rsi(close: np.ndarray, n: int = 14) -> np.ndarray:
    """Wilder RSI. A window with no down-moves reads 100; a dead-flat window reads 50."""
    close = np.asarray(close, dtype=float)
    out = np.full(close.shape, np.nan)
    if len(close) < n + 1:
        return out
    d = np.diff(close)
    gain = np.where(d > 0, d, 0.0)
    loss = np.where(d < 0, -d, 0.0)
    avg_g = float(np.mean(gain[:n]))
    avg_l = float(np.mean(loss[:n]))

    def value(g, lo):
        if lo == 0.0:
            return 100.0 if g > 0.0 else 50.0
        return 100.0 - 100.0 / (1.0 + g / lo)

    out[n] = value(avg_g, avg_l)
    for t in range(n + 1, len(close)):
        avg_g = (avg_g * (n - 1) + gain[t - 1]) / n
        avg_l = (avg_l * (n - 1) + loss[t - 1]) / n
        out[t] = value(avg_g, avg_l)
    return out


def macd(close: np.ndarray, fast: int = 12, slow: int = 26, signal: int = 9):
    """Returns (line, signal, histogram)."""
    close = np.asarray(close, dtype=float)
    line = ema(close, fast) - ema(close, slow)
    sig = ema(line, signal)
    return line, sig, line - sig


def true_range(high, low, close) -> np.ndarray:
    high, low, close = (np.asarray(a, dtype=float) for a in (high, low, close))
    tr = np.full(close.shape, np.nan)
    if len(close) < 2:
        return tr
    prev = close[:-1]
    tr[1:] = np.maximum.reduce([high[1:] - low[1:], np.abs(high[1:] - prev), np.abs(low[1:] - prev)])
    return tr


def atr(high, low, close, n: int = 14) -> np.ndarray:
    tr = true_range(high, low, close)
    out = np.full(tr.shape, np.nan)
    if len(tr) < n + 1:
        return out
    prev = float(np.mean(tr[1:n + 1]))
    out[n] = prev
    for t in range(n + 1, len(tr)):
        prev = (prev * (n - 1) + tr[t]) / n
        out[t] = prev
    return out


def rolling_std(x: np.ndarray, n: int, ddof: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.full(x.shape, np.nan)
    if len(x) < n or n - ddof <= 0:
        return out
    out[n - 1:] = np.lib.stride_tricks.sliding_window_view(x, n).std(axis=1, ddof=ddof)
    return out


def bollinger(close, n: int = 20, k: float = 2.0):
    """Returns (upper, middle, lower) using the population standard deviation."""
    mid = sma(close, n)
    sd = rolling_std(close, n)
    return mid + k * sd, mid, mid - k * sd


def momentum(close, n: int = 10) -> np.ndarray:
    close = np.asarray(close, dtype=float)
    out = np.full(close.shape, np.nan)
    if len(close) > n:
        out[n:] = close[n:] - close[:-n]
    return out


def rate_of_change(close, n: int = 10) -> np.ndarray:
    close = np.asarray(close, dtype=float)
    out = np.full(close.shape, np.nan)
    if len(close) > n:
        out[n:] = close[n:] / close[:-n] - 1.0
    return out


def rolling_volatility(close, n: int = 20) -> np.ndarray:
    """Sample std of the last n simple returns."""
    close = np.asarray(close, dtype=float)
    out = np.full(close.shape, np.nan)
    if len(close) < n + 1 or n < 2:
        return out
    r = close[1:] / close[:-1] - 1.0
    out[n:] = np.lib.stride_tricks.sliding_window_view(r, n).std(axis=1, ddof=1)
    return out


def obv(close, volume) -> np.ndarray:
    close = np.asarray(close, dtype=float)
    volume = np.asarray(volume, dtype=float)
    out = np.zeros(close.shape)
    if len(close) == 0:
        return out
    step = np.sign(np.diff(close)) * volume[1:]
    out[1:] = np.cumsum(step)
    return out


def zscore(close, n: int = 20) -> np.ndarray:
    close = np.asarray(close, dtype=float)
    mid = sma(close, n)
    sd = rolling_std(close, n)
    with np.errstate(invalid="ignore", divide="ignore"):
        z = (close - mid) / sd
    z[(sd == 0.0) & ~np.isnan(sd)] = 0.0
    return z


# name -> (default params, number of params accepted)
_DEFAULTS: dict[str, tuple[float, ...]] = {
    "sma": (20,),
    "ema": (20,),
    "rsi": (14,),
    "macd": (12, 26, 9),
    "atr": (14,),
    "bb": (20, 2),
    "mom": (10,),
    "roc": (10,),
    "vol": (20,),
    "obv": (),
    "zscore": (20,),
}

SUPPORTED = tuple(_DEFAULTS)

_NAME_RE = re.compile(r"^([a-z]+)((?:_\d+(?:\.\d+)?)*)$")


def parse_name(name: str) -> tuple[str, tuple[float, ...]]:
    """Split ``"macd_5_10_3"`` into ``("macd", (5, 10, 3))``; bare names take defaults."""
    m = _NAME_RE.match(name)
    if not m or m.group(1) not in _DEFAULTS:
        raise UnknownIndicatorError(
            f"unknown indicator {name!r}; supported: {', '.join(SUPPORTED)} "
            "(optionally suffixed with _<param>, e.g. sma_50, macd_12_26_9)"
        )
    base = m.group(1)
    raw = [p for p in m.group(2).split("_") if p]
    defaults = _DEFAULTS[base]
    if len(raw) > len(defaults):
        raise UnknownIndicatorError(f"indicator {name!r} takes at most {len(defaults)} parameters")
    params = [float(p) for p in raw] + list(defaults[len(raw):])
    return base, tuple(params)


def lookback(name: str) -> int:
    """Minimum number of bars for ``name`` to produce a value."""
    base, p = parse_name(name)
    if base in ("sma", "ema", "bb", "zscore"):
        return int(p[0])
    if base == "macd":
        return int(p[1]) + int(p[2]) - 1
    if base in ("rsi", "atr", "mom", "roc", "vol"):
        return int(p[0]) + 1
    return 1


def compute_series(name: str, open_, high, low, close, volume) -> dict[str, np.ndarray]:
    """All output series for one requested indicator name."""
    base, p = parse_name(name)
    ints = [int(v) for v in p]
    if base == "sma":
        return {name: sma(close, ints[0])}
    if base == "ema":
        return {name: ema(close, ints[0])}
    if base == "rsi":
        return {name: rsi(close, ints[0])}
    if base == "macd":
        line, sig, hist = macd(close, *ints)
        return {name: line, f"{name}_signal": sig, f"{name}_hist": hist}
    if base == "atr":
        return {name: atr(high, low, close, ints[0])}
    if base == "bb":
        up, mid, lo = bollinger(close, ints[0], p[1])
        return {f"{name}_upper": up, f"{name}_mid": mid, f"{name}_lower": lo}
    if base == "mom":
        return {name: momentum(close, ints[0])}
    if base == "roc":
        return {name: rate_of_change(close, ints[0])}
    if base == "vol":
        return {name: rolling_volatility(close, ints[0])}
    if base == "obv":
        return {name: obv(close, volume)}
    return {name: zscore(close, ints[0])}


def bar_arrays(bars: Sequence) -> tuple[np.ndarray, ...]:
    cols = np.array([(b.open, b.high, b.low, b.close, b.volume) for b in bars], dtype=float)
    if len(cols) == 0:
        cols = np.zeros((0, 5))
    return tuple(cols[:, i] for i in range(5))


def indicators(bars: Sequence, names: Sequence[str]) -> dict[str, float]:
    """Latest value of each requested indicator over ``bars``.

    Indicators whose lookback exceeds the window are left out of the result
    rather than reported as zero.
    """
    for name in names:
        parse_name(name)
    arrays = bar_arrays(bars)
    out: dict[str, float] = {}
    if not bars:
        return out
    for name in names:
        for key, series in compute_series(name, *arrays).items():
            v = series[-1]
            if not np.isnan(v):
                out[key] = float(v)
    return out
