from __future__ import annotations

import csv
import json
import shutil

import numpy as np
import pytest

from hedgeflow.cli import main
from helpers import SAMPLE_DIR


@pytest.fixture()
def sample(tmp_path):
    d = tmp_path / "data"
    shutil.copytree(SAMPLE_DIR, d)
    return d


def test_ingest_clean(sample, capsys):
    assert main(["ingest", str(sample)]) == 0
    assert "3 assets, 0 violations" in capsys.readouterr().out


def test_ingest_violation_strict(sample, capsys):
    path = sample / "BTC.csv"
    lines = path.read_text().splitlines()
    f = lines[5].split(",")
    f[2] = str(float(f[4]) * 0.5)  # high below close
    lines[5] = ",".join(f)
    path.write_text("\n".join(lines) + "\n")
    assert main(["ingest", str(sample)]) == 0
    assert "1 violations" in capsys.readouterr().out
    assert main(["ingest", "--strict", str(sample)]) == 1


def test_ingest_empty_and_missing(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["ingest", str(tmp_path / "empty")]) == 1
    assert "0 assets" in capsys.readouterr().out
    assert main(["ingest", str(tmp_path / "nope")]) == 2


def test_allocate_json(tmp_path, capsys):
    rng = np.random.default_rng(1)
    path = tmp_path / "r.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "Crypto", "Equity", "Forex"])
        for i, row in enumerate(rng.normal(0.0005, 0.01, (120, 3))):
            w.writerow([f"2021-{1 + i // 28:02d}-{1 + i % 28:02d}", *row])
    assert main(["allocate", "--returns", str(path)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["assets"] == ["Crypto", "Equity", "Forex"]
    assert sum(out["weights"]) == pytest.approx(1.0, abs=1e-9)
    assert min(out["weights"]) >= 0
    assert main(["allocate", "--returns", str(tmp_path / "missing.csv")]) == 2


def test_backtest_determinism_and_report(tmp_path, capsys):
    cfg = SAMPLE_DIR / "sample_config.json"
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["backtest", "--config", str(cfg), "--out", str(a)]) == 0
    assert main(["backtest", "--config", str(cfg), "--out", str(b), "--backend", "zmr"]) == 0
    assert "Total return" in capsys.readouterr().out
    assert main(["backtest", "--config", str(cfg), "--out", str(tmp_path / "a2")]) == 0
    for f in ("metrics.json", "equity.csv", "fills.csv"):
        assert (a / f).read_bytes() == (tmp_path / "a2" / f).read_bytes()

    assert main(["report", str(a)]) == 0
    rows = list(csv.reader((a / "cumret.csv").open()))
    assert rows[0] == ["date", "cumulative_return"]
    tr = json.loads((a / "metrics.json").read_text())["tr"]
    assert abs(float(rows[-1][1]) - tr) <= 1e-12

    merged = tmp_path / "merged.csv"
    assert main(["report", str(a), str(b), "--out", str(merged)]) == 0
    assert next(csv.reader(merged.open())) == ["date", "a", "b"]
    assert main(["report", str(tmp_path / "nothing")]) == 2


def test_backtest_bad_config(tmp_path, capsys):
    raw = json.loads((SAMPLE_DIR / "sample_config.json").read_text())
    raw["data_dir"] = str(SAMPLE_DIR)
    raw["bogus_key"] = 1
    path = tmp_path / "c.json"
    path.write_text(json.dumps(raw))
    assert main(["backtest", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "bogus_key" in capsys.readouterr().err


def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
