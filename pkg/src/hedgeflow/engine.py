"""Deterministic daily backtest loop for the analyst team and its manager."""

from __future__ import annotations

import bisect
import datetime as dt
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from hedgeflow import allocator, conferences, metrics
from hedgeflow.conferences import AnalystReport, ConferenceLog, TriggerKind
from hedgeflow.errors import (
    ConfigError,
    DeterminismViolation,
    EngineInvariantError,
    GatewayError,
    HedgeflowError,
    InsufficientHistoryError,
)
from hedgeflow.gateway import DEFAULT_MODEL, DEFAULT_TEMPERATURE, Cassette, CassetteMode, Gateway
from hedgeflow.marketdata import AssetClass, AssetId, Dataset, MarketSnapshot, ReturnSeries
from hedgeflow.memory import AgentMemory, HashEmbedder, MemoryKind, MemoryStore, Query
from hedgeflow.policy import (
    ANALYSTS,
    MANAGER,
    RULE_BACKENDS,
    TEMPLATES,
    Action,
    ActionKind,
    AgentProfile,
    DecisionBackend,
    DecisionContext,
    LLMPolicy,
    TemplateName,
    fmt,
    pct,
    reflect,
    render,
)

log = logging.getLogger(__name__)

CONFERENCES = ("bac", "esc", "emc")
BACKENDS = tuple(RULE_BACKENDS) + ("llm",)


@dataclass
class RunConfig:
    data_dir: str
    start: dt.date
    end: dt.date
    policy_backend: str
    test_start: dt.date | None = None
    cassette: str | None = None
    cassette_mode: str = "replay"
    fee_bps: float = 0.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = conferences.DEFAULT_LAMBDA3
    alpha: float = 0.95
    bac_cycle_days: int = 30
    reflection_horizon_days: int = 4
    gamma: float = 1.0
    seed: int = 0
    initial_capital: float = 1_000_000.0
    execution: str = "close"
    conferences: tuple[str, ...] = CONFERENCES
    esc_rounds: int = 1
    top_k: int = 5
    embedder: str = "hash"
    embedding_dim: int = 64
    shared_experience: bool = True
    estimation_window: int = 60
    tsm_lookback: int = 252
    zmr_window: int = 20
    zmr_threshold: float = 1.0
    risk_free: float = 0.0
    amplitude_mode: str = "range"
    model: str = DEFAULT_MODEL
    temperature: float = DEFAULT_TEMPERATURE
    log_prompts: bool = False
    query_chars: int = 400

    def __post_init__(self):
        if self.test_start is None:
            self.test_start = self.start

    @property
    def fee(self) -> float:
        return self.fee_bps / 10_000.0

    def to_json(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, dt.date):
                out[k] = v.isoformat()
            elif isinstance(v, tuple):
                out[k] = list(v)
        return out


_REQUIRED = ("data_dir", "start", "end", "policy_backend")
_DATE_KEYS = ("start", "end", "test_start")


def parse_config(raw: dict, base_dir: Path | None = None) -> RunConfig:
    """Validate a raw config mapping; every problem is reported at once."""
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a JSON object"])
    known = {f.name: f for f in fields(RunConfig)}
    for key in sorted(raw):
        if key not in known:
            problems.append(f"unknown key {key!r}")
    for key in _REQUIRED:
        if key not in raw:
            problems.append(f"missing required key {key!r}")
    values: dict = {}
    for key, value in raw.items():
        if key not in known:
            continue
        try:
            values[key] = _coerce(key, value)
        except (TypeError, ValueError) as exc:
            problems.append(f"{key}: {exc}")
    if problems:
        raise ConfigError(problems)
    cfg = RunConfig(**values)
    if base_dir is not None:
        if not Path(cfg.data_dir).is_absolute():
            cfg.data_dir = str((base_dir / cfg.data_dir).resolve())
        if cfg.cassette and not Path(cfg.cassette).is_absolute():
            cfg.cassette = str((base_dir / cfg.cassette).resolve())
    problems.extend(_check(cfg))
    if problems:
        raise ConfigError(problems)
    return cfg


def _coerce(key: str, value):
    if key in _DATE_KEYS:
        if value is None and key == "test_start":
            return None
        if not isinstance(value, str):
            raise TypeError("expected a YYYY-MM-DD string")
        return dt.date.fromisoformat(value)
    if key in ("data_dir", "policy_backend", "cassette_mode", "execution", "embedder", "amplitude_mode", "model"):
        if not isinstance(value, str):
            raise TypeError("expected a string")
        return value
    if key == "cassette":
        if value is not None and not isinstance(value, str):
            raise TypeError("expected a path string or null")
        return value
    if key == "conferences":
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise TypeError("expected a list of conference names")
        return tuple(value)
    if key in ("shared_experience", "log_prompts"):
        if not isinstance(value, bool):
            raise TypeError("expected true or false")
        return value
    if key in ("bac_cycle_days", "reflection_horizon_days", "seed", "esc_rounds", "top_k", "embedding_dim",
               "estimation_window", "tsm_lookback", "zmr_window", "query_chars"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError("expected an integer")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TypeError("expected a number")
    return float(value)


def _check(cfg: RunConfig) -> list[str]:
    p = []
    if cfg.end < cfg.start:
        p.append("end precedes start")
    if not cfg.start <= cfg.test_start <= cfg.end:
        p.append("test_start must lie within [start, end]")
    if cfg.policy_backend not in BACKENDS:
        p.append(f"policy_backend must be one of {', '.join(BACKENDS)}")
    if cfg.cassette_mode not in {m.value for m in CassetteMode}:
        p.append("cassette_mode must be record, replay or passthrough")
    if cfg.policy_backend == "llm" and cfg.cassette_mode != "passthrough" and not cfg.cassette:
        p.append("llm backend needs a cassette path unless cassette_mode is passthrough")
    if cfg.fee_bps < 0:
        p.append("fee_bps must be >= 0")
    for k in ("lambda1", "lambda2"):
        if getattr(cfg, k) < 0:
            p.append(f"{k} must be >= 0")
    if not 0 <= cfg.lambda3 <= 1:
        p.append("lambda3 must lie in [0, 1]")
    if not 0 < cfg.alpha < 1:
        p.append("alpha must lie in (0, 1)")
    if not 0 < cfg.gamma <= 1:
        p.append("gamma must lie in (0, 1]")
    for k in ("bac_cycle_days", "reflection_horizon_days", "esc_rounds", "top_k", "embedding_dim", "query_chars"):
        if getattr(cfg, k) < 1:
            p.append(f"{k} must be >= 1")
    if cfg.estimation_window < allocator.MIN_SAMPLES:
        p.append(f"estimation_window must be >= {allocator.MIN_SAMPLES}")
    if cfg.initial_capital <= 0:
        p.append("initial_capital must be > 0")
    if cfg.execution not in ("close", "next_open"):
        p.append("execution must be close or next_open")
    if cfg.embedder not in ("hash", "remote"):
        p.append("embedder must be hash or remote")
    if cfg.amplitude_mode not in ("range", "close"):
        p.append("amplitude_mode must be range or close")
    bad = [c for c in cfg.conferences if c not in CONFERENCES]
    if bad:
        p.append(f"unknown conferences {bad}; choose from {list(CONFERENCES)}")
    if not 0 <= cfg.temperature <= 2:
        p.append("temperature must lie in [0, 2]")
    if not Path(cfg.data_dir).is_dir():
        p.append(f"data_dir {cfg.data_dir} does not exist")
    return p


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError([f"config file {path} not found"]) from None
    except ValueError as exc:
        raise ConfigError([f"config file is not valid JSON: {exc}"]) from None
    return parse_config(raw, path.parent)


class Side(str, Enum):
    BUY = "Buy"
    SELL = "Sell"


@dataclass(frozen=True)
class Fill:
    date: dt.date
    asset: AssetId
    side: Side
    quantity: float
    price: float
    cost: float

    @property
    def notional(self) -> float:
        return self.quantity * self.price


@dataclass
class PortfolioState:
    cash: float
    positions: dict[str, float]
    class_budget: dict[AssetClass, float]
    equity_curve: list[tuple[dt.date, float]] = field(default_factory=list)
    weight_history: list[tuple[dt.date, dict[str, float]]] = field(default_factory=list)

    def dump(self) -> dict:
        return {"cash": self.cash, "positions": dict(self.positions),
                "class_budget": {k.value: v for k, v in self.class_budget.items()},
                "last_equity": self.equity_curve[-1] if self.equity_curve else None}


@dataclass
class RewardTrace:
    gamma: float = 1.0
    rewards: list[float] = field(default_factory=list)

    def discounted(self) -> float:
        return float(sum(self.gamma ** t * r for t, r in enumerate(self.rewards)))

    def compounded(self) -> float:
        return float(np.prod([1.0 + r for r in self.rewards]) - 1.0)


@dataclass
class Analyst:
    profile: AgentProfile
    assets: list[AssetId]
    memory: AgentMemory


@dataclass
class _PendingReflection:
    analyst: Analyst
    action: Action
    decided_on: dt.date
    price: float
    due_index: int
    held: bool
    context: str


def execute(action: Action, state: PortfolioState, snapshot: MarketSnapshot, fee: float = 0.0,
            cap: float | None = None, price: float | None = None) -> Fill | None:
    """Apply one action at the given price (default: today's reference close).

    Buys spend ``fraction`` of the deployable pool, which is the cash left under
    the asset's budget ``cap`` (no cap means all cash). Sells dispose of
    ``fraction`` of the held quantity.
    """
    asset = action.asset
    if action.kind is ActionKind.HOLD or asset is None:
        return None
    if price is None:
        if not snapshot.tradable(asset.symbol):
            return None
        price = snapshot.marks[asset.symbol][1]
    held = state.positions.get(asset.symbol, 0.0)
    if action.kind.is_buy:
        room = state.cash if cap is None else max(0.0, cap - held * price)
        outlay = action.fraction * min(state.cash, room)
        notional = outlay / (1.0 + fee)
        if notional * (1.0 + fee) > state.cash:
            log.warning("scaling down %s buy to available cash", asset.symbol)
            notional = state.cash / (1.0 + fee)
        qty = notional / price
        if qty <= 0 or notional < 1e-9:
            return None
        cost = notional * fee
        state.cash = max(0.0, state.cash - notional - cost)
        state.positions[asset.symbol] = held + qty
        return Fill(snapshot.date, asset, Side.BUY, qty, price, cost)
    qty = action.fraction * held
    if qty <= 0:
        log.warning("%s on %s with no position; nothing to sell", action.kind.value, asset.symbol)
        return None
    notional = qty * price
    cost = notional * fee
    state.cash += notional - cost
    remaining = held - qty
    state.positions[asset.symbol] = 0.0 if action.kind.fraction == 1.0 else remaining
    return Fill(snapshot.date, asset, Side.SELL, qty, price, cost)


@dataclass
class RunArtifacts:
    config: RunConfig
    equity_curve: list[tuple[dt.date, float]]
    fills: list[Fill]
    weights: list[tuple[dt.date, dict[str, float]]]
    symbols: list[str]
    metrics: metrics.MetricsReport
    reward: RewardTrace
    logs: list[ConferenceLog]
    prompts: list[dict]
    usage: dict
    memories: dict[str, MemoryStore]
    budgets: list[tuple[dt.date, dict[str, float]]]

    def metrics_json(self) -> dict:
        out = self.metrics.to_json()
        out["reward"] = {"gamma": self.reward.gamma, "discounted": self.reward.discounted(),
                         "compounded": self.reward.compounded()}
        out["usage"] = dict(self.usage)
        return out

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        (out / "logs").mkdir(parents=True, exist_ok=True)
        with (out / "equity.csv").open("w", encoding="utf-8", newline="") as fh:
            fh.write("date,total_value\n")
            for d, v in self.equity_curve:
                fh.write(f"{d.isoformat()},{v!r}\n")
        with (out / "fills.csv").open("w", encoding="utf-8", newline="") as fh:
            fh.write("date,symbol,side,quantity,price,cost\n")
            for f in self.fills:
                fh.write(f"{f.date.isoformat()},{f.asset.symbol},{f.side.value},{f.quantity!r},{f.price!r},{f.cost!r}\n")
        with (out / "weights.csv").open("w", encoding="utf-8", newline="") as fh:
            fh.write("date," + ",".join(self.symbols) + ",cash\n")
            for d, w in self.weights:
                vals = [w.get(s, 0.0) for s in self.symbols]
                cash = 1.0 - sum(vals)
                fh.write(d.isoformat() + "," + ",".join(repr(x) for x in vals) + f",{cash!r}\n")
        (out / "metrics.json").write_text(json.dumps(self.metrics_json(), indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
        with (out / "logs" / "conferences.jsonl").open("w", encoding="utf-8") as fh:
            for entry in self.logs:
                fh.write(json.dumps(entry.to_json(), sort_keys=True) + "\n")
        if self.prompts:
            with (out / "logs" / "prompts.jsonl").open("w", encoding="utf-8") as fh:
                for p in self.prompts:
                    fh.write(json.dumps(p, sort_keys=True) + "\n")
        with (out / "budgets.csv").open("w", encoding="utf-8", newline="") as fh:
            classes = sorted({k for _, b in self.budgets for k in b})
            fh.write("date," + ",".join(classes) + "\n")
            for d, b in self.budgets:
                fh.write(d.isoformat() + "," + ",".join(repr(b.get(c, 0.0)) for c in classes) + "\n")
        mem_dir = out / "memory"
        mem_dir.mkdir(exist_ok=True)
        for name, store in self.memories.items():
            store.dump(mem_dir / f"{name}.jsonl")
        (out / "config.json").write_text(json.dumps(self.config.to_json(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
        return out


def make_backend(cfg: RunConfig, gateway: Gateway | None) -> DecisionBackend:
    name = cfg.policy_backend
    if name == "llm":
        if gateway is None:
            raise HedgeflowError("llm backend needs a gateway")
        return LLMPolicy(gateway, cfg.model, cfg.temperature)
    if name == "tsm":
        return RULE_BACKENDS[name](cfg.tsm_lookback)
    if name == "zmr":
        return RULE_BACKENDS[name](cfg.zmr_window, cfg.zmr_threshold)
    return RULE_BACKENDS[name]()


def _indicator_names(cfg: RunConfig) -> tuple[str, ...]:
    from hedgeflow.marketdata import DEFAULT_INDICATORS
    extra = [f"roc_{cfg.tsm_lookback}", f"zscore_{cfg.zmr_window}"]
    return tuple(dict.fromkeys(list(DEFAULT_INDICATORS) + extra))


def load_dataset(cfg: RunConfig) -> Dataset:
    full = Dataset.from_dir(cfg.data_dir, indicator_names=_indicator_names(cfg), amplitude_mode=cfg.amplitude_mode)
    bars = {a: [b for b in full.bars(a.symbol) if cfg.start <= b.date <= cfg.end] for a in full.assets}
    news = [n for a in full.assets for d in full.calendar if cfg.start <= d <= cfg.end for n in full.news(a.symbol, d)]
    return Dataset({a: b for a, b in bars.items() if b}, news, indicator_names=full.indicator_names,
                   amplitude_mode=cfg.amplitude_mode)


class Engine:
    def __init__(self, cfg: RunConfig, data: Dataset, backend: DecisionBackend | None = None,
                 gateway: Gateway | None = None, embed: Callable[[str], Sequence[float]] | None = None,
                 analysts: Sequence[AgentProfile] = ANALYSTS, manager: AgentProfile = MANAGER):
        self.cfg = cfg
        self.data = data
        self.gateway = gateway
        self.backend = backend or make_backend(cfg, gateway)
        self.manager = manager
        if embed is None:
            if cfg.embedder == "remote":
                if gateway is None:
                    raise HedgeflowError("remote embedder needs a gateway")
                embed = gateway.embed_remote
            else:
                embed = HashEmbedder(cfg.embedding_dim, cfg.seed)
        self.embed = embed
        shared = MemoryStore(MemoryKind.GENERAL_EXPERIENCE, cfg.embedding_dim, "shared") \
            if cfg.shared_experience else None
        self.shared_general = shared
        self.analysts: list[Analyst] = []
        for prof in analysts:
            assets = sorted((a for a in data.assets if a.asset_class is prof.asset_class), key=lambda a: a.symbol)
            if assets:
                self.analysts.append(Analyst(prof, assets, AgentMemory(prof.key, cfg.embedding_dim, shared)))
        if not self.analysts:
            raise HedgeflowError("no analyst covers any asset in the dataset")
        self.classes = [a.profile.asset_class for a in self.analysts]
        self.symbols = [a.symbol for an in self.analysts for a in an.assets]
        self.asset_by_symbol = {a.symbol: a for an in self.analysts for a in an.assets}
        self.class_size = {an.profile.asset_class: len(an.assets) for an in self.analysts}
        self.state = PortfolioState(cfg.initial_capital, {s: 0.0 for s in self.symbols},
                                    {c: 1.0 / len(self.classes) for c in self.classes})
        self.fills: list[Fill] = []
        self.reward = RewardTrace(cfg.gamma)
        self.logs: list[ConferenceLog] = []
        self.prompts: list[dict] = []
        self.budgets: list[tuple[dt.date, dict[str, float]]] = []
        self.asset_returns: list[list[float]] = []
        self.class_pnl = {c: 0.0 for c in self.classes}
        self._pending: list[_PendingReflection] = []
        self._orders: list[Action] = []
        self.calendar = [d for d in data.calendar if cfg.test_start <= d <= cfg.end]
        self.schedule = set(conferences.bac_schedule(cfg.test_start, cfg.end, self.calendar, cfg.bac_cycle_days))
        self._cycle_start: dt.date | None = None
        self._cycle_value: float | None = None
        self._cycle_pnl = dict(self.class_pnl)
        self._cycle_budget = dict(self.state.class_budget)
        self._prev_prices: dict[str, float] = {}
        self._class_returns = self._build_class_returns()

    # --- helpers -----------------------------------------------------------

    def _build_class_returns(self) -> dict[AssetClass, ReturnSeries]:
        """Equal-weighted class returns on the union calendar, carrying prices over closed days."""
        cal = self.data.calendar
        out = {}
        for an in self.analysts:
            cols = []
            for a in an.assets:
                px = []
                for d in cal:
                    m = self.data.mark(a.symbol, d)
                    px.append(np.nan if m is None else m[1])
                px = np.array(px)
                with np.errstate(invalid="ignore"):
                    r = px[1:] / px[:-1] - 1.0
                cols.append(r)
            mat = np.vstack(cols)
            valid = ~np.isnan(mat)
            counts = valid.sum(axis=0)
            sums = np.where(valid, mat, 0.0).sum(axis=0)
            keep = counts > 0
            dates = tuple(d for d, k in zip(cal[1:], keep) if k)
            r = sums[keep] / counts[keep]
            out[an.profile.asset_class] = ReturnSeries(
                AssetId(an.profile.name, an.profile.asset_class), dates, r)
        return out

    def _returns_until(self, cls: AssetClass, date: dt.date) -> ReturnSeries:
        s = self._class_returns[cls]
        n = bisect.bisect_right(s.dates, date)
        return ReturnSeries(s.asset, s.dates[:n], s.returns[:n])

    def _price(self, snapshot: MarketSnapshot, symbol: str) -> float | None:
        m = snapshot.marks.get(symbol)
        return None if m is None else m[1]

    def _value(self, snapshot: MarketSnapshot) -> float:
        v = self.state.cash
        for s, q in self.state.positions.items():
            if q:
                v += q * self._price(snapshot, s)
        return v

    def _class_value(self, cls: AssetClass, prices: dict[str, float]) -> float:
        return sum(self.state.positions[a.symbol] * prices.get(a.symbol, 0.0)
                   for an in self.analysts if an.profile.asset_class is cls for a in an.assets)

    def _cap(self, asset: AssetId, snapshot: MarketSnapshot, at_open: bool = False) -> float:
        cls = asset.asset_class
        if at_open:
            # orders filled at the open are sized on the last known closes
            value = self.state.cash + sum(q * self._prev_prices[s] for s, q in self.state.positions.items() if q)
        else:
            value = self._value(snapshot)
        return self.state.class_budget[cls] * value / self.class_size[cls]

    def _llm(self) -> Callable[[str], str] | None:
        return self.backend.complete if isinstance(self.backend, LLMPolicy) else None

    def _strict(self) -> bool:
        return self.gateway is not None and self.gateway.mode is CassetteMode.REPLAY

    def query_text(self, snapshot: MarketSnapshot, asset: AssetId) -> str:
        """Summarised query: market line plus headlines, truncated."""
        sym = asset.symbol
        ind = snapshot.indicators.get(sym, {})
        tools = snapshot.tools.get(sym, {})
        price = self._price(snapshot, sym)
        parts = [f"{snapshot.date.isoformat()} {sym} {asset.asset_class.value} price {fmt(price)}"]
        if "return_1d" in tools:
            parts.append(f"1d {pct(tools['return_1d'])}")
        if "move_3d" in tools:
            parts.append(f"3d {pct(tools['move_3d'])}")
        for key in ("rsi_14", "macd_hist", "zscore_20", "vol_20"):
            if key in ind:
                parts.append(f"{key} {fmt(ind[key])}")
        text = ", ".join(parts)
        heads = [n.headline for n in snapshot.news.get(sym, [])]
        if heads:
            text += ". News: " + "; ".join(heads)
        return text[:self.cfg.query_chars]

    def _check(self, snapshot: MarketSnapshot) -> None:
        bad = []
        if self.state.cash < -1e-9:
            bad.append(f"negative cash {self.state.cash}")
        for s, q in self.state.positions.items():
            if q < -1e-12:
                bad.append(f"negative position {s} {q}")
        v = self._value(snapshot)
        if not v > 0:
            bad.append(f"non-positive portfolio value {v}")
        if bad:
            raise EngineInvariantError("; ".join(bad), self.state.dump())

    # --- one day -------------------------------------------------------------

    def step(self, date: dt.date) -> tuple[list[Fill], float | None]:
        cfg = self.cfg
        for an in self.analysts:
            an.memory.set_clock(date)
        if self.shared_general is not None:
            self.shared_general.clock = date
        snap = self.data.snapshot(date)
        if snap.date != date:
            raise HedgeflowError(f"{date} is not a trading date")
        fills: list[Fill] = []
        prev_prices = dict(self._prev_prices)
        class_before = {c: self._class_value(c, prev_prices) for c in self.classes}
        flows = {c: 0.0 for c in self.classes}

        def apply(action: Action, price: float | None = None):
            cap = self._cap(action.asset, snap, price is not None) if action.kind.is_buy else None
            f = execute(action, self.state, snap, cfg.fee, cap, price)
            if f is not None:
                fills.append(f)
                cls = f.asset.asset_class
                flows[cls] += f.notional + f.cost if f.side is Side.BUY else -(f.notional - f.cost)

        if cfg.execution == "next_open":
            waiting = []
            for order in self._orders:
                bar = snap.bars.get(order.asset.symbol)
                if bar is None:
                    waiting.append(order)
                    continue
                apply(order, bar.adjusted().open if order.asset.asset_class is AssetClass.EQUITY else bar.open)
            self._orders = waiting

        # retrieval and decisions, in fixed analyst order
        decisions: list[tuple[Analyst, Action]] = []
        for an in self.analysts:
            for asset in an.assets:
                if not snap.tradable(asset.symbol):
                    continue
                q_text = self.query_text(snap, asset)
                q_emb = tuple(self.embed(q_text))
                retrieved = an.memory.retrieve(Query(q_text, q_emb, cfg.top_k, as_of=date))
                an.memory.market.add(date, q_text, q_emb, {"symbol": asset.symbol})
                position = self.state.positions[asset.symbol]
                prompt = render(TEMPLATES[TemplateName.DECISION], snap, retrieved, an.profile, asset, position)
                if cfg.log_prompts:
                    self.prompts.append({"date": date.isoformat(), "agent": an.profile.name,
                                         "symbol": asset.symbol, "kind": "decision", "prompt": prompt})
                action = self.backend.decide(DecisionContext(an.profile, snap, tuple(retrieved), asset,
                                                             position, prompt))
                decisions.append((an, action))

        if "emc" in cfg.conferences:
            decisions = self._run_emc(date, snap, decisions)

        for an, action in decisions:
            if action.kind is ActionKind.CLOSE_ALL:
                targets = [Action(a, ActionKind.SELL_ALL, action.rationale) for a in an.assets
                           if self.state.positions[a.symbol] > 0 and snap.tradable(a.symbol)]
            else:
                targets = [action]
            for act in targets:
                if cfg.execution == "next_open" and act.kind is not ActionKind.HOLD:
                    self._orders.append(act)
                else:
                    apply(act)
            idx = len(self.data.bars(action.asset.symbol, until=date)) - 1
            self._pending.append(_PendingReflection(
                an, action, date, self._price(snap, action.asset.symbol), idx + cfg.reflection_horizon_days,
                self.state.positions[action.asset.symbol] > 0, self._context(snap, action.asset)))

        # mark to market
        prices = {s: self._price(snap, s) for s in self.symbols if self._price(snap, s) is not None}
        for c in self.classes:
            self.class_pnl[c] += self._class_value(c, prices) - class_before[c] - flows[c]
        self._prev_prices = prices
        self._check(snap)
        value = self._value(snap)
        reward = None
        if self.state.equity_curve:
            reward = value / self.state.equity_curve[-1][1] - 1.0
            self.reward.rewards.append(reward)
        self.state.equity_curve.append((date, value))
        self.state.weight_history.append(
            (date, {s: self.state.positions[s] * prices[s] / value for s in self.symbols if s in prices}))
        self.asset_returns.append([
            (prices[s] / prev_prices[s] - 1.0) if s in prev_prices and s in prices else 0.0 for s in self.symbols])
        self.fills.extend(fills)

        if date in self.schedule:
            self._run_cycle_end(date, snap, value)

        self._reflect_due(date, snap)
        return fills, reward

    def _context(self, snap: MarketSnapshot, asset: AssetId) -> str:
        ind = snap.indicators.get(asset.symbol, {})
        bits = [f"price {fmt(self._price(snap, asset.symbol))}"]
        for k in ("rsi_14", "zscore_20"):
            if k in ind:
                bits.append(f"{k} {fmt(ind[k])}")
        return ", ".join(bits)

    def _reflect_due(self, date: dt.date, snap: MarketSnapshot) -> None:
        keep = []
        for p in self._pending:
            sym = p.action.asset.symbol
            if not snap.tradable(sym) or len(self.data.bars(sym, until=date)) - 1 < p.due_index:
                keep.append(p)
                continue
            realized = self._price(snap, sym) / p.price - 1.0
            reflect(p.analyst.profile, p.action, realized, self.cfg.reflection_horizon_days, p.decided_on, date,
                    p.analyst.memory.reflection, self.embed, p.context, p.held)
        self._pending = keep

    # --- conferences ----------------------------------------------------------

    def _run_emc(self, date, snap, decisions):
        fired = conferences.detect_extreme(date, self.data)
        if not fired:
            return decisions
        by_symbol: dict[str, list[TriggerKind]] = {}
        for asset, kind in fired:
            if asset.symbol in self.asset_by_symbol:
                by_symbol.setdefault(asset.symbol, []).append(kind)
        out = list(decisions)
        for i, (an, action) in enumerate(decisions):
            kinds = by_symbol.get(action.asset.symbol)
            if not kinds:
                continue
            peers = [(o.profile, any(self.state.positions[a.symbol] > 0 for a in o.assets))
                     for o in self.analysts if o is not an]
            pos = self.state.positions[action.asset.symbol]
            holdings = self._holdings_text(snap)
            bundle = conferences.crisis_bundle(self.data, date, an.profile, action.asset, kinds, action, pos,
                                               holdings, self.manager, peers, self.cfg.lambda3)
            try:
                actions, entry = conferences.run_emc(date, bundle, self._llm())
            except GatewayError:
                if self._strict():
                    raise
                log.warning("EMC for %s on %s skipped after gateway failure", action.asset.symbol, date)
                continue
            self.logs.append(entry)
            if self.cfg.log_prompts:
                for t in entry.transcript:
                    self.prompts.append({"date": date.isoformat(), "agent": an.profile.name,
                                         "symbol": action.asset.symbol, "kind": "crisis", "prompt": t["prompt"]})
            out[i] = (an, actions[0])
        return out

    def _holdings_text(self, snap: MarketSnapshot) -> str:
        value = self._value(snap)
        parts = [f"cash {self.state.cash / value:.1%}"]
        for s in self.symbols:
            q = self.state.positions[s]
            if q:
                parts.append(f"{s} {q * self._price(snap, s) / value:.1%}")
        return ", ".join(parts)

    def _run_cycle_end(self, date: dt.date, snap: MarketSnapshot, value: float) -> None:
        cfg = self.cfg
        if self._cycle_start is not None and "esc" in cfg.conferences:
            try:
                _, entry = conferences.run_esc(date, [(an.profile, an.memory) for an in self.analysts],
                                               self._cycle_start, self.embed, cfg.esc_rounds, self._llm())
                self.logs.append(entry)
            except GatewayError:
                if self._strict():
                    raise
                log.warning("ESC on %s skipped after gateway failure", date)
        if "bac" in cfg.conferences:
            self._run_bac(date, value)
        self._cycle_start = date
        self._cycle_value = value
        self._cycle_pnl = dict(self.class_pnl)
        self._cycle_budget = dict(self.state.class_budget)

    def cycle_returns(self) -> dict[AssetClass, float]:
        """Each class's P&L since the cycle began, relative to its budgeted capital."""
        out = {}
        for c in self.classes:
            pnl = self.class_pnl[c] - self._cycle_pnl.get(c, 0.0)
            base = self._cycle_budget[c] * (self._cycle_value or self.cfg.initial_capital)
            out[c] = pnl / base if base > 0 else 0.0
        return out

    def _run_bac(self, date: dt.date, value: float) -> None:
        cfg = self.cfg
        series = [self._returns_until(c, date) for c in self.classes]
        try:
            rule_rho, cov, history = allocator.estimate_inputs(series, cfg.estimation_window, cfg.bac_cycle_days)
        except InsufficientHistoryError as exc:
            log.warning("BAC on %s skipped: %s", date, exc)
            entry = ConferenceLog(date, conferences.ConferenceKind.BAC)
            entry.outcome = {"skipped": str(exc)}
            self.logs.append(entry)
            return
        cyc = self.cycle_returns()
        reports = []
        for an, r in zip(self.analysts, rule_rho):
            c = an.profile.asset_class
            ret = cyc[c]
            reports.append(AnalystReport(
                an.profile,
                f"Cycle return {pct(ret)} on a {self.state.class_budget[c]:.1%} budget.",
                ret,
                f"trailing {cfg.estimation_window}-day mean implies {pct(r)} next cycle; "
                f"{'requests a larger' if r > 0 else 'accepts a smaller'} budget."))
        lambda2 = 0.0 if cfg.policy_backend == "mv" else cfg.lambda2
        llm = self._llm()
        try:
            result, _, entry = conferences.run_bac(date, reports, self.manager, rule_rho, cov, history,
                                                   cfg.lambda1, lambda2, cfg.alpha, llm, cfg.bac_cycle_days)
        except GatewayError:
            if self._strict():
                raise
            log.warning("BAC on %s fell back to rule estimates after gateway failure", date)
            result, _, entry = conferences.run_bac(date, reports, self.manager, rule_rho, cov, history,
                                                   cfg.lambda1, lambda2, cfg.alpha, None, cfg.bac_cycle_days)
        self.logs.append(entry)
        self.state.class_budget = {c: float(w) for c, w in zip(self.classes, result.weights.omega)}
        self.budgets.append((date, {c.value: w for c, w in self.state.class_budget.items()}))

    # --- whole run -------------------------------------------------------------

    def run(self) -> RunArtifacts:
        if not self.calendar:
            raise HedgeflowError("no trading dates between test_start and end")
        self.budgets.append((self.calendar[0], {c.value: w for c, w in self.state.class_budget.items()}))
        for date in self.calendar:
            self.step(date)
        dates = [d for d, _ in self.state.equity_curve]
        values = [v for _, v in self.state.equity_curve]
        W = [[w.get(s, 0.0) for s in self.symbols] for _, w in self.state.weight_history]
        report = metrics.compute_report(dates, values, W, self.asset_returns, self.cfg.risk_free,
                                        self.cfg.bac_cycle_days)
        memories = {}
        for an in self.analysts:
            memories[f"{an.profile.key}_MI"] = an.memory.market
            memories[f"{an.profile.key}_IR"] = an.memory.reflection
            if self.shared_general is None:
                memories[f"{an.profile.key}_GE"] = an.memory.general
        if self.shared_general is not None:
            memories["shared_GE"] = self.shared_general
        usage = dict(self.gateway.usage) if self.gateway is not None else {"calls": 0, "in": 0, "out": 0, "cost": 0.0}
        return RunArtifacts(self.cfg, list(self.state.equity_curve), list(self.fills),
                            list(self.state.weight_history), list(self.symbols), report, self.reward,
                            list(self.logs), list(self.prompts), usage, memories, list(self.budgets))


def build_gateway(cfg: RunConfig, transport=None) -> Gateway | None:
    if cfg.policy_backend != "llm" and cfg.embedder != "remote":
        return None
    mode = CassetteMode(cfg.cassette_mode)
    if cfg.cassette:
        cassette = Cassette.open(cfg.cassette, mode)
    else:
        cassette = Cassette(mode)
    return Gateway(cassette=cassette, transport=transport)


def run(cfg: RunConfig, out_dir=None, transport=None, backend: DecisionBackend | None = None) -> RunArtifacts:
    """Load data, run the backtest and (optionally) write every artifact to ``out_dir``."""
    data = load_dataset(cfg)
    gateway = build_gateway(cfg, transport)
    try:
        engine = Engine(cfg, data, backend=backend, gateway=gateway)
        artifacts = engine.run()
        if gateway is not None and gateway.mode is CassetteMode.REPLAY and gateway.cassette.cursor != len(
                gateway.cassette.entries):
            raise DeterminismViolation(gateway.cassette.entries[gateway.cassette.cursor].fingerprint,
                                       "<end of run>")
        if gateway is not None and gateway.mode is CassetteMode.RECORD:
            gateway.cassette.save()
    finally:
        if gateway is not None:
            gateway.close()
    if out_dir is not None:
        artifacts.write(out_dir)
    return artifacts
