"""Regenerate the bundled sample dataset under src/hedgeflow/fixtures/sample."""

from __future__ import annotations

import json
from pathlib import Path

from hedgeflow.synthetic import write_sample

ROOT = Path(__file__).resolve().parents[1]
OUT = ROOT / "src" / "hedgeflow" / "fixtures" / "sample"

CONFIG = {
    "data_dir": ".",
    "start": "2020-01-01",
    "end": "2021-12-31",
    "test_start": "2021-01-01",
    "policy_backend": "tsm",
    "cassette": None,
    "fee_bps": 10,
    "lambda1": 1.0,
    "lambda2": 1.0,
    "lambda3": 0.5,
    "alpha": 0.95,
    "bac_cycle_days": 30,
    "reflection_horizon_days": 4,
    "gamma": 1.0,
    "seed": 0,
}

if __name__ == "__main__":
    write_sample(OUT)
    (OUT / "sample_config.json").write_text(json.dumps(CONFIG, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {OUT}")
