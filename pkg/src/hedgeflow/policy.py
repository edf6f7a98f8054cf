"""Action space, prompt templates, response parsing and decision backends."""

from __future__ import annotations

import datetime as dt
import json
import logging
import re
import string
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Mapping, Sequence

from hedgeflow.errors import DeterminismViolation, GatewayError, TemplateError, TemporalGatingError
from hedgeflow.gateway import DEFAULT_MODEL, DEFAULT_TEMPERATURE, ChatRequest, CassetteMode, Gateway
from hedgeflow.marketdata import AssetClass, AssetId, MarketSnapshot
from hedgeflow.memory import MemoryRecord, MemoryStore

log = logging.getLogger(__name__)

FALLBACK_RATIONALE = "fallback: unparseable response"


class ActionKind(str, Enum):
    BUY_QUARTER = "BUY_QUARTER"
    BUY_HALF = "BUY_HALF"
    BUY_ALL = "BUY_ALL"
    SELL_QUARTER = "SELL_QUARTER"
    SELL_HALF = "SELL_HALF"
    SELL_ALL = "SELL_ALL"
    HOLD = "HOLD"
    CLOSE_ALL = "CLOSE_ALL"

    @property
    def fraction(self) -> float:
        return _FRACTIONS[self]

    @property
    def is_buy(self) -> bool:
        return self in (ActionKind.BUY_QUARTER, ActionKind.BUY_HALF, ActionKind.BUY_ALL)

    @property
    def is_sell(self) -> bool:
        return self in (ActionKind.SELL_QUARTER, ActionKind.SELL_HALF, ActionKind.SELL_ALL, ActionKind.CLOSE_ALL)


_FRACTIONS = {
    ActionKind.BUY_QUARTER: 0.25, ActionKind.BUY_HALF: 0.5, ActionKind.BUY_ALL: 1.0,
    ActionKind.SELL_QUARTER: 0.25, ActionKind.SELL_HALF: 0.5, ActionKind.SELL_ALL: 1.0,
    ActionKind.HOLD: 0.0, ActionKind.CLOSE_ALL: 1.0,
}


@dataclass(frozen=True)
class Action:
    asset: AssetId | None
    kind: ActionKind
    rationale: str = ""
    fallback: bool = False

    @property
    def fraction(self) -> float:
        return self.kind.fraction


@dataclass(frozen=True)
class AgentProfile:
    name: str
    role: str
    asset_class: AssetClass | None = None
    backend: str = "rule"

    @property
    def key(self) -> str:
        return self.name.lower()


ANALYSTS = (
    AgentProfile("Dave", "a Bitcoin analyst at a hedge fund who manages the cryptocurrency book", AssetClass.CRYPTO),
    AgentProfile("Bob", "a Dow Jones analyst at a hedge fund who manages the equity book", AssetClass.EQUITY),
    AgentProfile("Emily", "a forex analyst at a hedge fund who manages the currency book", AssetClass.FOREX),
)
MANAGER = AgentProfile("Otto", "the hedge fund manager responsible for portfolio risk and budget allocation")


class TemplateName(str, Enum):
    DECISION = "decision"
    BUDGET = "budget"
    CONSOLIDATE = "consolidate"
    CRISIS = "crisis"


@dataclass(frozen=True)
class PromptTemplate:
    name: TemplateName
    skeleton: str

    @property
    def placeholders(self) -> list[str]:
        found = []
        for m in string.Template.pattern.finditer(self.skeleton):
            key = m.group("named") or m.group("braced")
            if key and key not in found:
                found.append(key)
        return found

    def render(self, fields: Mapping[str, object]) -> str:
        for key in self.placeholders:
            if key not in fields or fields[key] is None:
                raise TemplateError(self.name.value, key)
        return string.Template(self.skeleton).substitute({k: str(v) for k, v in fields.items()})


_ACTIONS_LINE = ", ".join(k.value for k in ActionKind)

TEMPLATES = {
    TemplateName.DECISION: PromptTemplate(TemplateName.DECISION, """\
TASK: DECISION
You are ${name}, ${role}.
Date: ${date}. Asset under review: ${symbol} (${asset_class}). Current holding: ${position} units.

Prices today:
${prices}

News:
${news}

Tool results:
${tools}

Retrieved memories (top ${k}):
${memories}

Choose exactly one action from: ${actions}.
Answer in JSON only, for example {"action": "HOLD", "rationale": "why"}.
"""),
    TemplateName.BUDGET: PromptTemplate(TemplateName.BUDGET, """\
TASK: BUDGET
You are ${name}, ${role}.
Date: ${date}. The budget allocation conference for the next ${cycle_days} days is in session.

Analyst reports:
${reports}

Auxiliary risk tools:
${tools}

Estimate each analyst's expected return over the next cycle as a fraction.
Answer in JSON only, with one key per analyst, for example ${example}.
"""),
    TemplateName.CONSOLIDATE: PromptTemplate(TemplateName.CONSOLIDATE, """\
TASK: CONSOLIDATE
Experience sharing conference, ${date}, round ${round}.
${presenter} presents a typical case:
${case}

Discussion from peers:
${discussion}

Distil the case and the discussion into one reusable investment lesson, in plain text.
"""),
    TemplateName.CRISIS: PromptTemplate(TemplateName.CRISIS, """\
TASK: CRISIS
Extreme market conference, ${date}. You are ${name}, ${role}.
Trigger: ${trigger}

Market data:
${market}

Current holdings:
${holdings}

Your earlier plan today: ${plan}

Suggestions:
${suggestions}

Weigh each suggestion section by its stated weight. Choose exactly one action from: ${actions}.
Answer in JSON only, for example {"action": "SELL_HALF", "rationale": "why"}.
"""),
}


def fmt(x: float) -> str:
    return f"{x:.6g}"


def pct(x: float) -> str:
    return f"{x * 100:+.2f}%"


def format_memories(retrieved: Sequence[MemoryRecord]) -> str:
    if not retrieved:
        return "No relevant memories."
    return "\n".join(f"[{i}] {r.timestamp.isoformat()} | {r.kind.value} | {r.text}"
                     for i, r in enumerate(retrieved, start=1))


def market_block(snapshot: MarketSnapshot, symbol: str) -> tuple[str, str, str]:
    """(prices, news, tools) text for one asset in a snapshot."""
    bar = snapshot.bars.get(symbol)
    if bar is None:
        d, px = snapshot.marks[symbol]
        prices = f"no trading today; last price {fmt(px)} on {d.isoformat()}"
    else:
        prices = (f"open {fmt(bar.open)}, high {fmt(bar.high)}, low {fmt(bar.low)}, "
                  f"close {fmt(bar.close)}, adj_close {fmt(bar.adj_close)}, volume {fmt(bar.volume)}")
    items = snapshot.news.get(symbol, [])
    news = "\n".join(f"- {n.date.isoformat()}: {n.headline}" for n in items) if items else "No news today."
    vals = {**snapshot.indicators.get(symbol, {}), **snapshot.tools.get(symbol, {})}
    tools = ", ".join(f"{k}={fmt(v)}" for k, v in sorted(vals.items())) if vals else "none available"
    return prices, news, tools


def check_gating(snapshot: MarketSnapshot, retrieved: Sequence[MemoryRecord]) -> None:
    for r in retrieved:
        if r.timestamp > snapshot.date:
            raise TemporalGatingError(f"memory {r.id} dated {r.timestamp} is after {snapshot.date}")
    for items in snapshot.news.values():
        for n in items:
            if n.date > snapshot.date:
                raise TemporalGatingError(f"news dated {n.date} is after {snapshot.date}")


def render(template: PromptTemplate, snapshot: MarketSnapshot, retrieved: Sequence[MemoryRecord],
           profile: AgentProfile, asset: AssetId, position: float = 0.0) -> str:
    """Render the decision prompt for one asset."""
    check_gating(snapshot, retrieved)
    prices, news, tools = market_block(snapshot, asset.symbol)
    return template.render({
        "name": profile.name, "role": profile.role, "date": snapshot.date.isoformat(),
        "symbol": asset.symbol, "asset_class": asset.asset_class.value, "position": fmt(position),
        "prices": prices, "news": news, "tools": tools, "k": len(retrieved),
        "memories": format_memories(retrieved), "actions": _ACTIONS_LINE,
    })


_DECODER = json.JSONDecoder()


def first_json_object(text: str, required: Sequence[str] = ()) -> dict | None:
    """First syntactically valid JSON object in ``text`` that has every ``required`` key."""
    if not isinstance(text, str):
        return None
    i = text.find("{")
    while i != -1:
        try:
            obj, _ = _DECODER.raw_decode(text, i)
        except (ValueError, RecursionError):
            obj = None
        if isinstance(obj, dict) and all(k in obj for k in required):
            return obj
        i = text.find("{", i + 1)
    return None


def _action_kind(raw) -> ActionKind | None:
    if not isinstance(raw, str):
        return None
    key = re.sub(r"[\s\-]+", "_", raw.strip()).upper()
    try:
        return ActionKind(key)
    except ValueError:
        return None


def parse_decision(text, asset: AssetId | None = None) -> Action:
    """Map a model response to an Action. Never raises; bad input yields a flagged HOLD."""
    if isinstance(text, bytes):
        text = text.decode("utf-8", errors="replace")
    obj = first_json_object(text, ("action",))
    kind = _action_kind(obj.get("action")) if obj else None
    if kind is None:
        return Action(asset, ActionKind.HOLD, FALLBACK_RATIONALE, fallback=True)
    rationale = obj.get("rationale", "")
    if not isinstance(rationale, str):
        rationale = json.dumps(rationale, sort_keys=True)
    return Action(asset, kind, rationale)


@dataclass(frozen=True)
class DecisionContext:
    profile: AgentProfile
    snapshot: MarketSnapshot
    retrieved: tuple[MemoryRecord, ...]
    asset: AssetId
    position: float = 0.0
    prompt: str = ""


class DecisionBackend:
    name = "base"
    uses_llm = False

    def decide(self, ctx: DecisionContext) -> Action:
        raise NotImplementedError


class HoldPolicy(DecisionBackend):
    name = "hold"

    def decide(self, ctx):
        return Action(ctx.asset, ActionKind.HOLD, "hold policy")


class BuyAndHoldPolicy(DecisionBackend):
    name = "buy_and_hold"

    def decide(self, ctx):
        if ctx.position == 0 and ctx.snapshot.tradable(ctx.asset.symbol):
            return Action(ctx.asset, ActionKind.BUY_ALL, "initial buy")
        return Action(ctx.asset, ActionKind.HOLD, "buy and hold")


class TimeSeriesMomentum(DecisionBackend):
    """Long when the trailing ``lookback``-day return is positive, flat when negative."""

    name = "tsm"

    def __init__(self, lookback: int = 252):
        self.indicator = f"roc_{lookback}"

    def decide(self, ctx):
        r = ctx.snapshot.indicators.get(ctx.asset.symbol, {}).get(self.indicator)
        if r is None:
            return Action(ctx.asset, ActionKind.HOLD, f"{self.indicator} unavailable")
        if r > 0:
            return Action(ctx.asset, ActionKind.BUY_ALL, f"{self.indicator} {pct(r)} > 0")
        if r < 0 and ctx.position > 0:
            return Action(ctx.asset, ActionKind.SELL_ALL, f"{self.indicator} {pct(r)} < 0")
        return Action(ctx.asset, ActionKind.HOLD, f"{self.indicator} {pct(r)}")


class ZScoreMeanReversion(DecisionBackend):
    """Buy half when the price sits more than ``threshold`` std below its mean, sell half above."""

    name = "zmr"

    def __init__(self, window: int = 20, threshold: float = 1.0):
        self.indicator = f"zscore_{window}"
        self.threshold = threshold

    def decide(self, ctx):
        z = ctx.snapshot.indicators.get(ctx.asset.symbol, {}).get(self.indicator)
        if z is None:
            return Action(ctx.asset, ActionKind.HOLD, f"{self.indicator} unavailable")
        if z > self.threshold and ctx.position > 0:
            return Action(ctx.asset, ActionKind.SELL_HALF, f"z={z:.3f} above +{self.threshold}")
        if z < -self.threshold:
            return Action(ctx.asset, ActionKind.BUY_HALF, f"z={z:.3f} below -{self.threshold}")
        return Action(ctx.asset, ActionKind.HOLD, f"z={z:.3f}")


class MeanVariancePolicy(DecisionBackend):
    """Analysts stay fully deployed; the allocator (with lambda2 = 0) sets the mix."""

    name = "mv"

    def decide(self, ctx):
        return Action(ctx.asset, ActionKind.BUY_ALL, "fill class budget")


class ScriptedPolicy(DecisionBackend):
    name = "scripted"

    def __init__(self, script: Mapping[tuple[dt.date, str], ActionKind]):
        self.script = dict(script)

    def decide(self, ctx):
        kind = self.script.get((ctx.snapshot.date, ctx.asset.symbol), ActionKind.HOLD)
        return Action(ctx.asset, ActionKind(kind), "scripted")


class LLMPolicy(DecisionBackend):
    """D(LLM(prompt)) through the gateway."""

    name = "llm"
    uses_llm = True

    def __init__(self, gateway: Gateway, model: str = DEFAULT_MODEL, temperature: float = DEFAULT_TEMPERATURE):
        self.gateway = gateway
        self.model = model
        self.temperature = temperature

    def complete(self, prompt: str) -> str:
        return self.gateway.chat(ChatRequest.user(prompt, self.model, self.temperature))

    def decide(self, ctx):
        try:
            text = self.complete(ctx.prompt)
        except DeterminismViolation:
            raise
        except GatewayError as exc:
            if self.gateway.mode is CassetteMode.REPLAY:
                raise
            log.warning("decision for %s on %s fell back to HOLD: %s", ctx.asset.symbol, ctx.snapshot.date, exc)
            return Action(ctx.asset, ActionKind.HOLD, f"fallback: gateway error: {exc}", fallback=True)
        action = parse_decision(text, ctx.asset)
        if action.fallback:
            log.warning("unparseable decision for %s on %s", ctx.asset.symbol, ctx.snapshot.date)
        return action


RULE_BACKENDS: dict[str, Callable[[], DecisionBackend]] = {
    "hold": HoldPolicy,
    "buy_and_hold": BuyAndHoldPolicy,
    "tsm": TimeSeriesMomentum,
    "zmr": ZScoreMeanReversion,
    "mv": MeanVariancePolicy,
}


def decide(backend: DecisionBackend, profile: AgentProfile, snapshot: MarketSnapshot,
           retrieved: Sequence[MemoryRecord], asset: AssetId, position: float = 0.0) -> Action:
    prompt = render(TEMPLATES[TemplateName.DECISION], snapshot, retrieved, profile, asset, position)
    return backend.decide(DecisionContext(profile, snapshot, tuple(retrieved), asset, position, prompt))


def reflection_pnl(action: Action, realized_return: float, held: bool = False) -> float:
    """Outcome of an action from its own point of view."""
    if action.kind.is_buy:
        return realized_return
    if action.kind.is_sell:
        return -realized_return
    return realized_return if held else 0.0


def reflection_text(profile: AgentProfile, action: Action, decided_on: dt.date,
                    realized_return: float, horizon: int, context: str = "", held: bool = False) -> str:
    pnl = reflection_pnl(action, realized_return, held)
    if action.kind is ActionKind.HOLD and not held:
        verdict = "stayed out of the market"
    elif pnl > 0:
        verdict = "the decision paid off"
    elif pnl < 0:
        verdict = "the decision lost money"
    else:
        verdict = "the decision was neutral"
    symbol = action.asset.symbol if action.asset else "portfolio"
    parts = [
        f"{profile.name} reflection on {symbol}: on {decided_on.isoformat()} chose {action.kind.value}",
        f"(rationale: {action.rationale or 'none'}).",
        f"Over {horizon} trading days the asset moved {pct(realized_return)}; outcome {pct(pnl)}, {verdict}.",
    ]
    if context:
        parts.append(f"Context: {context}")
    return " ".join(parts)


def reflect(profile: AgentProfile, action: Action, realized_return: float, horizon: int,
            decided_on: dt.date, today: dt.date, store: MemoryStore, embed: Callable[[str], Sequence[float]],
            context: str = "", held: bool = False) -> MemoryRecord:
    """Write one investment-reflection record for an action whose horizon has elapsed."""
    text = reflection_text(profile, action, decided_on, realized_return, horizon, context, held)
    meta = {
        "agent": profile.name,
        "symbol": action.asset.symbol if action.asset else "",
        "action": action.kind.value,
        "decided_on": decided_on.isoformat(),
        "return": repr(float(realized_return)),
        "pnl": repr(float(reflection_pnl(action, realized_return, held))),
        "horizon": str(horizon),
    }
    store.add(today, text, embed(text), meta)
    return store[-1]
