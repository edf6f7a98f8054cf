from __future__ import annotations

import datetime as dt
import json

import numpy as np
import pytest

from hedgeflow.errors import BarValidationError, DataParseError, HedgeflowError
from hedgeflow.marketdata import (
    CSV_HEADER,
    AssetClass,
    AssetId,
    Bar,
    Dataset,
    cumulative_amplitude_3d,
    daily_amplitude,
    discover_assets,
    load_ohlcv,
    scan_ohlcv,
    signed_move_3d,
)
from helpers import BTC, DJI, SAMPLE_DIR, bars_from, headline

D = dt.date


def write(path, rows):
    path.write_text(",".join(CSV_HEADER) + "\n" + "".join(r + "\n" for r in rows), encoding="utf-8")
    return path


def test_row_maps_to_bar(tmp_path):
    p = write(tmp_path / "X.csv", ["2021-01-04,100,110,95,105,105,1000"])
    (b,) = load_ohlcv(p)
    assert (b.date, b.open, b.high, b.low, b.close, b.adj_close, b.volume) == (D(2021, 1, 4), 100, 110, 95, 105, 105, 1000)


def test_high_below_open_is_rejected(tmp_path):
    p = write(tmp_path / "X.csv", ["2021-01-04,100,90,85,88,88,1000"])
    with pytest.raises(BarValidationError) as e:
        load_ohlcv(p)
    assert "2021-01-04" in str(e.value)


def test_loader_sorts_rows(tmp_path):
    rows = ["2021-01-06,3,3,3,3,3,1", "2021-01-04,1,1,1,1,1,1", "2021-01-05,2,2,2,2,2,1"]
    got = load_ohlcv(write(tmp_path / "X.csv", rows))
    assert [b.date for b in got] == sorted(D.fromisoformat(r[:10]) for r in rows)


def test_malformed_row_reports_line(tmp_path):
    p = write(tmp_path / "X.csv", ["2021-01-04,1,1,1,1,1,1", "2021-01-05,1,1,oops,1,1,1"])
    with pytest.raises(DataParseError) as e:
        scan_ohlcv(p)
    assert e.value.line == 3


def test_duplicate_dates_rejected(tmp_path):
    p = write(tmp_path / "X.csv", ["2021-01-04,1,1,1,1,1,1", "2021-01-04,1,1,1,1,1,1"])
    with pytest.raises(DataParseError):
        scan_ohlcv(p)


def test_scan_collects_issues(tmp_path):
    p = write(tmp_path / "X.csv", ["2021-01-04,1,1,1,1,1,1", "2021-01-05,10,9,11,10,10,1"])
    bars, issues = scan_ohlcv(p)
    assert len(bars) == 1 and len(issues) == 1 and issues[0].startswith("2021-01-05")


def test_daily_amplitude_examples():
    prev = Bar(D(2021, 1, 1), 100, 100, 100, 100, 100, 1)
    assert daily_amplitude([prev, Bar(D(2021, 1, 2), 100, 104, 98, 100, 100, 1)]) == pytest.approx(0.06)
    assert daily_amplitude([prev, Bar(D(2021, 1, 2), 100, 100, 100, 100, 100, 1)]) == 0.0
    prev2 = Bar(D(2021, 1, 1), 200, 200, 200, 200, 200, 1)
    assert daily_amplitude([prev2, Bar(D(2021, 1, 2), 206, 210, 205, 206, 206, 1)]) == pytest.approx(0.025)


def test_three_day_amplitude_examples():
    assert cumulative_amplitude_3d(bars_from([100, 97, 93, 89.78])) == pytest.approx(0.1022)
    assert signed_move_3d(bars_from([100, 97, 93, 89.78])) == pytest.approx(-0.1022)
    assert cumulative_amplitude_3d(bars_from([5, 5, 5, 5])) == 0.0
    assert cumulative_amplitude_3d(bars_from([100, 105, 103, 109])) == pytest.approx(0.09)


def test_adjusted_bar_rescales_ohlc():
    b = Bar(D(2021, 1, 1), 100, 110, 90, 100, 50, 1).adjusted()
    assert (b.open, b.high, b.low, b.close) == (50, 55, 45, 50)


def make_ds():
    btc = bars_from([100.0 + i for i in range(10)], D(2021, 1, 1))
    dji = bars_from([50.0 + i for i in range(10)], D(2021, 1, 1))
    dji = [b for b in dji if b.date.weekday() < 5]
    news = [headline(BTC, D(2021, 1, 5), "past"), headline(BTC, D(2021, 1, 6), "future")]
    return Dataset({BTC: btc, DJI: dji}, news, indicator_names=("sma_3", "sma_20"))


def test_snapshot_excludes_future():
    snap = make_ds().snapshot(D(2021, 1, 5))
    assert snap.date == D(2021, 1, 5)
    assert all(b.date <= D(2021, 1, 5) for b in snap.bars.values())
    assert [n.headline for n in snap.news["BTC"]] == ["past"]
    assert snap.bars["BTC"].close == 104.0


def test_snapshot_on_non_trading_date_rolls_back():
    ds = make_ds()
    # 2021-01-02/03 are a weekend for DJI but BTC trades, so pick a date past all data
    snap = ds.snapshot(D(2021, 2, 1))
    assert snap.date == D(2021, 1, 10)


def test_snapshot_weekend_marks_carry_forward():
    snap = make_ds().snapshot(D(2021, 1, 9))  # Saturday
    assert not snap.tradable("DJI")
    assert snap.marks["DJI"][0] == D(2021, 1, 8)


def test_first_date_indicators_absent():
    snap = make_ds().snapshot(D(2021, 1, 1))
    assert "sma_20" not in snap.indicators["BTC"]
    assert "sma_3" not in snap.indicators["BTC"]


def test_before_first_bar_raises():
    with pytest.raises(HedgeflowError):
        make_ds().snapshot(D(2020, 12, 1))


def test_indicator_values_match_truncated_history():
    ds = make_ds()
    snap = ds.snapshot(D(2021, 1, 6))
    assert snap.indicators["BTC"]["sma_3"] == pytest.approx((103 + 104 + 105) / 3)


def test_equity_reference_price_is_adjusted():
    closes = [10.0, 11.0, 12.0]
    bars = bars_from(closes, adj=[5.0, 5.5, 6.0])
    ds = Dataset({DJI: bars}, indicator_names=())
    assert ds.mark("DJI", D(2021, 1, 3))[1] == 6.0
    np.testing.assert_allclose(ds.returns("DJI").returns, [0.1, 6.0 / 5.5 - 1])


def test_sample_fixture_loads():
    ds = Dataset.from_dir(SAMPLE_DIR)
    assert [a.symbol for a in ds.assets] == ["BTC", "DJI", "EURUSD"]
    assert ds.calendar[0] == D(2020, 1, 1) and ds.calendar[-1] == D(2021, 12, 31)


def test_discover_without_manifest(tmp_path):
    write(tmp_path / "AAA.csv", ["2021-01-04,1,1,1,1,1,1"])
    assert discover_assets(tmp_path) == [AssetId("AAA", AssetClass.EQUITY)]


def test_manifest_classes(tmp_path):
    (tmp_path / "assets.json").write_text(json.dumps({"X": "Forex"}))
    assert discover_assets(tmp_path)[0].asset_class is AssetClass.FOREX
