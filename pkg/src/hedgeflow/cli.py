"""Command-line entry points: ingest, allocate, backtest, report."""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import sys
from pathlib import Path

import numpy as np

from hedgeflow import allocator, engine
from hedgeflow.errors import (
    BarValidationError,
    ConfigError,
    DataParseError,
    DeterminismViolation,
    HedgeflowError,
)
from hedgeflow.gateway import CassetteMode
from hedgeflow.marketdata import ReturnSeries, AssetId, AssetClass, discover_assets, load_news, scan_ohlcv

log = logging.getLogger("hedgeflow")

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_USAGE = 2
EXIT_DETERMINISM = 3

METRIC_ROWS = (
    ("tr", "Total return", "pct"),
    ("arr", "Annual return rate", "pct"),
    ("sr", "Sharpe ratio", "num"),
    ("cr", "Calmar ratio", "num"),
    ("sor", "Sortino ratio", "num"),
    ("mdd", "Max drawdown", "pct"),
    ("vol", "Daily volatility", "pct"),
    ("ent", "Entropy", "num"),
    ("enb", "Effective bets", "num"),
)


def _err(msg: str) -> None:
    print(f"hedgeflow: {msg}", file=sys.stderr)


def metrics_table(rows: dict[str, dict]) -> str:
    """Fixed-width table with one column per run."""
    names = list(rows)
    width = max([12] + [len(n) for n in names])
    lines = [f"{'metric':<20}" + "".join(f"{n:>{width + 2}}" for n in names)]
    for key, label, kind in METRIC_ROWS:
        cells = []
        for n in names:
            v = rows[n].get(key)
            if v is None:
                cells.append("n/a")
            elif kind == "pct":
                cells.append(f"{v * 100:.2f}%")
            else:
                cells.append(f"{v:.4f}")
        lines.append(f"{label:<20}" + "".join(f"{c:>{width + 2}}" for c in cells))
    return "\n".join(lines)


def cmd_ingest(args) -> int:
    data_dir = Path(args.data_dir)
    if not data_dir.is_dir():
        _err(f"data directory {data_dir} does not exist")
        return EXIT_USAGE
    try:
        assets = discover_assets(data_dir)
    except (ValueError, KeyError) as exc:
        _err(f"assets.json is invalid: {exc}")
        return EXIT_FINDINGS
    if not assets:
        print("warning: 0 assets found")
        return EXIT_FINDINGS
    violations = 0
    fatal = False
    for asset in assets:
        path = data_dir / f"{asset.symbol}.csv"
        if not path.exists():
            print(f"{asset.symbol:<10} missing file {path.name}")
            fatal = True
            continue
        try:
            bars, issues = scan_ohlcv(path, asset)
        except DataParseError as exc:
            print(f"{asset.symbol:<10} unreadable: {exc}")
            fatal = True
            continue
        span = f"{bars[0].date} .. {bars[-1].date}" if bars else "no valid bars"
        print(f"{asset.symbol:<10} {asset.asset_class.value:<7} {len(bars):>6} bars  {span}  "
              f"{len(issues)} violations")
        for issue in issues:
            print(f"    {issue}")
        violations += len(issues)
    news_path = data_dir / "news.jsonl"
    if news_path.exists():
        try:
            items = load_news(news_path, {a.symbol: a for a in assets})
            print(f"news       {len(items)} headlines")
        except (DataParseError, ValueError) as exc:
            print(f"news       unreadable: {exc}")
            fatal = True
    print(f"{len(assets)} assets, {violations} violations")
    if fatal:
        return EXIT_FINDINGS
    return EXIT_FINDINGS if (violations and args.strict) else EXIT_OK


def read_returns_csv(path) -> list[ReturnSeries]:
    """Columns per asset class; an optional leading ``date`` column."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if len(rows) < 2:
        raise ValueError("returns file needs a header and at least one row")
    header = [h.strip() for h in rows[0]]
    has_date = header[0].lower() == "date"
    names = header[1:] if has_date else header
    if not names:
        raise ValueError("returns file has no asset columns")
    dates, values = [], []
    for i, r in enumerate(rows[1:], start=2):
        if len(r) != len(header):
            raise ValueError(f"line {i}: expected {len(header)} fields, got {len(r)}")
        dates.append(dt.date.fromisoformat(r[0].strip()) if has_date else dt.date(2000, 1, 1) + dt.timedelta(i))
        values.append([float(x) for x in (r[1:] if has_date else r)])
    mat = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(mat)):
        raise ValueError("returns must be finite")
    return [ReturnSeries(AssetId(n, AssetClass.EQUITY), tuple(dates), mat[:, j]) for j, n in enumerate(names)]


def cmd_allocate(args) -> int:
    try:
        series = read_returns_csv(args.returns)
        n = len(series[0])
        rho, cov, history = allocator.estimate_inputs(series, window=args.window or n, cycle=args.cycle)
        problem = allocator.AllocationProblem(rho, cov, history, args.lambda1, args.lambda2, args.alpha)
    except FileNotFoundError:
        _err(f"returns file {args.returns} not found")
        return EXIT_USAGE
    except (ValueError, HedgeflowError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    result = allocator.solve(problem)
    out = result.to_json()
    out["assets"] = [s.asset.symbol for s in series]
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_backtest(args) -> int:
    try:
        cfg = engine.load_config(args.config)
        if args.backend:
            cfg.policy_backend = args.backend
        if args.cassette_mode:
            cfg.cassette_mode = args.cassette_mode
        problems = engine._check(cfg)
        if problems:
            raise ConfigError(problems)
    except ConfigError as exc:
        _err("invalid config:")
        for p in exc.problems:
            print(f"  - {p}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out) if args.out else Path("runs") / Path(args.config).stem
    try:
        artifacts = engine.run(cfg, out)
    except DeterminismViolation as exc:
        _err(f"determinism violation: {exc}")
        return EXIT_DETERMINISM
    except (DataParseError, BarValidationError) as exc:
        _err(f"data error: {exc}")
        return EXIT_FINDINGS
    except HedgeflowError as exc:
        _err(str(exc))
        return EXIT_USAGE
    print(metrics_table({out.name: artifacts.metrics_json()}))
    print(f"artifacts written to {out}")
    return EXIT_OK


def _read_equity(run_dir: Path) -> list[tuple[str, float]]:
    with (run_dir / "equity.csv").open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        return [(r[0], float(r[1])) for r in reader if r]


def cmd_report(args) -> int:
    runs = [Path(p) for p in args.run_dirs]
    curves, tables = {}, {}
    for i, rd in enumerate(runs):
        name = rd.resolve().name or f"run{i}"
        while name in curves:
            name = f"{name}_{i}"
        try:
            eq = _read_equity(rd)
            tables[name] = json.loads((rd / "metrics.json").read_text(encoding="utf-8"))
        except (FileNotFoundError, NotADirectoryError):
            _err(f"{rd}: missing equity.csv or metrics.json")
            return EXIT_USAGE
        except (ValueError, IndexError, StopIteration) as exc:
            _err(f"{rd}: unreadable artifacts: {exc}")
            return EXIT_USAGE
        if not eq:
            _err(f"{rd}: empty equity curve")
            return EXIT_USAGE
        v0 = eq[0][1]
        curves[name] = {d: v / v0 - 1.0 for d, v in eq}
    out = Path(args.out) if args.out else runs[0] / "cumret.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    dates = sorted({d for c in curves.values() for d in c})
    with out.open("w", encoding="utf-8", newline="") as fh:
        cols = list(curves)
        header = ["cumulative_return"] if len(cols) == 1 else cols
        fh.write("date," + ",".join(header) + "\n")
        for d in dates:
            cells = ["" if d not in curves[c] else repr(curves[c][d]) for c in cols]
            fh.write(d + "," + ",".join(cells) + "\n")
    print(metrics_table(tables))
    print(f"cumulative returns written to {out}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _err(message)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hedgeflow", description="Multi-agent hedging backtester.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="validate a data directory")
    s.add_argument("data_dir")
    s.add_argument("--strict", action="store_true", help="exit 1 on any bar violation")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("allocate", help="one-shot budget allocation from a returns CSV")
    s.add_argument("--returns", required=True, help="CSV with one column of daily returns per asset class")
    s.add_argument("--lambda1", type=float, default=1.0)
    s.add_argument("--lambda2", type=float, default=1.0)
    s.add_argument("--alpha", type=float, default=0.95)
    s.add_argument("--cycle", type=int, default=30, help="days the expected return is scaled to")
    s.add_argument("--window", type=int, default=0, help="trailing rows to use (default: all)")
    s.set_defaults(func=cmd_allocate)

    s = sub.add_parser("backtest", help="run a full backtest")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="output directory (default runs/<config name>)")
    s.add_argument("--backend", choices=engine.BACKENDS, help="override policy_backend")
    s.add_argument("--cassette-mode", choices=[m.value for m in CassetteMode], help="override cassette_mode")
    s.set_defaults(func=cmd_backtest)

    s = sub.add_parser("report", help="cumulative-return CSV and metrics table for one or more runs")
    s.add_argument("run_dirs", nargs="+")
    s.add_argument("--out", help="CSV path (default <first run>/cumret.csv)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
