"""Budget allocation, experience sharing and extreme-market conferences.

Each conference takes an optional ``llm`` callable (prompt -> response text).
Without one, a deterministic rule stands in for the model and its output is
logged in the transcript exactly as a model response would be.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from hedgeflow import allocator
from hedgeflow.allocator import AllocationProblem
from hedgeflow.marketdata import (
    DAILY_AMPLITUDE_THRESHOLD,
    THREE_DAY_AMPLITUDE_THRESHOLD,
    AssetId,
    Dataset,
    cumulative_amplitude_3d,
    daily_amplitude,
    signed_move_3d,
)
from hedgeflow.memory import AgentMemory, MemoryRecord, MemoryStore
from hedgeflow.policy import (
    TEMPLATES,
    Action,
    ActionKind,
    AgentProfile,
    TemplateName,
    first_json_object,
    parse_decision,
    pct,
)

log = logging.getLogger(__name__)

LLM = Callable[[str], str]

DEFAULT_LAMBDA3 = 0.5


class ConferenceKind(str, Enum):
    BAC = "BAC"
    ESC = "ESC"
    EMC = "EMC"


class TriggerKind(str, Enum):
    DAILY = "Daily"
    THREE_DAY = "ThreeDay"


class Provenance(str, Enum):
    LLM_PARSED = "LlmParsed"
    RULE_ESTIMATED = "RuleEstimated"


@dataclass
class ConferenceLog:
    date: dt.date
    kind: ConferenceKind
    transcript: list[dict] = field(default_factory=list)
    outcome: dict = field(default_factory=dict)

    def add(self, prompt: str, response: str, speaker: str = "") -> None:
        self.transcript.append({"speaker": speaker, "prompt": prompt, "response": response})

    def to_json(self) -> dict:
        return {"date": self.date.isoformat(), "kind": self.kind.value,
                "transcript": self.transcript, "outcome": self.outcome}


@dataclass(frozen=True)
class AnalystReport:
    agent: AgentProfile
    profit_summary: str
    cycle_return: float
    budget_request: str


@dataclass(frozen=True)
class ExpectedReturnVector:
    rho: np.ndarray
    provenance: Provenance


def bac_schedule(start: dt.date, end: dt.date, calendar: Sequence[dt.date], cycle_days: int = 30) -> list[dt.date]:
    """Conference dates every ``cycle_days`` calendar days from ``start``.

    Each nominal date moves forward to the next date in ``calendar``.
    """
    cal = sorted(d for d in calendar if start <= d <= end)
    out = []
    nominal = start
    i = 0
    while nominal <= end:
        while i < len(cal) and cal[i] < nominal:
            i += 1
        if i == len(cal):
            break
        if not out or cal[i] != out[-1]:
            out.append(cal[i])
        nominal += dt.timedelta(days=cycle_days)
    return out


def nominal_schedule(start: dt.date, end: dt.date, cycle_days: int = 30) -> list[dt.date]:
    out, d = [], start
    while d <= end:
        out.append(d)
        d += dt.timedelta(days=cycle_days)
    return out


def parse_rho(text: str, agents: Sequence[AgentProfile]) -> np.ndarray | None:
    keys = [a.key for a in agents]
    obj = first_json_object(text, keys)
    if obj is None:
        # tolerate capitalised names
        obj = first_json_object(text)
        if obj is not None:
            obj = {str(k).lower(): v for k, v in obj.items()}
            if not all(k in obj for k in keys):
                obj = None
    if obj is None:
        return None
    try:
        rho = np.array([float(obj[k]) for k in keys])
    except (TypeError, ValueError):
        return None
    return rho if np.all(np.isfinite(rho)) else None


def risk_digest(agents: Sequence[AgentProfile], history: np.ndarray, alpha: float) -> str:
    lines = []
    for j, a in enumerate(agents):
        col = history[:, j]
        line = f"{a.name}: daily vol {col.std(ddof=1) if len(col) > 1 else 0.0:.4%}"
        if len(col) >= allocator.MIN_SAMPLES:
            line += f", CVaR({alpha:g}) {allocator.cvar_historical(col, alpha):.4%}"
        lines.append(line)
    if history.shape[1] > 1 and history.shape[0] > 2:
        with np.errstate(invalid="ignore", divide="ignore"):
            corr = np.corrcoef(history, rowvar=False)
        pairs = []
        for i in range(len(agents)):
            for j in range(i + 1, len(agents)):
                c = corr[i, j]
                pairs.append(f"{agents[i].name}/{agents[j].name} {c:+.2f}" if np.isfinite(c) else
                             f"{agents[i].name}/{agents[j].name} n/a")
        lines.append("correlations: " + ", ".join(pairs))
    return "\n".join(lines)


def run_bac(date: dt.date, reports: Sequence[AnalystReport], manager: AgentProfile,
            rule_rho: np.ndarray, cov: np.ndarray, history: np.ndarray,
            lambda1: float = 1.0, lambda2: float = 1.0, alpha: float = 0.95,
            llm: LLM | None = None, cycle_days: int = 30):
    """Set next cycle's class budgets. Returns (AllocationResult, ExpectedReturnVector, ConferenceLog)."""
    agents = [r.agent for r in reports]
    log_ = ConferenceLog(date, ConferenceKind.BAC)
    report_text = "\n".join(
        f"- {r.agent.name} ({r.agent.asset_class.value if r.agent.asset_class else 'n/a'}): "
        f"{r.profit_summary} Budget request: {r.budget_request}" for r in reports)
    prompt = TEMPLATES[TemplateName.BUDGET].render({
        "name": manager.name, "role": manager.role, "date": date.isoformat(), "cycle_days": cycle_days,
        "reports": report_text, "tools": risk_digest(agents, history, alpha),
        "example": json.dumps({a.key: 0.0 for a in agents}),
    })
    rule_json = json.dumps({a.key: float(x) for a, x in zip(agents, rule_rho)})
    if llm is None:
        response = rule_json
    else:
        response = llm(prompt)
    log_.add(prompt, response, manager.name)
    rho = parse_rho(response, agents)
    if rho is None:
        log.warning("BAC %s: unparseable expected returns, using rule estimate", date)
        exp = ExpectedReturnVector(np.asarray(rule_rho, dtype=float), Provenance.RULE_ESTIMATED)
    else:
        exp = ExpectedReturnVector(rho, Provenance.LLM_PARSED if llm is not None else Provenance.RULE_ESTIMATED)
    problem = AllocationProblem(exp.rho, cov, history, lambda1, lambda2, alpha)
    result = allocator.solve(problem)
    log_.outcome = {
        "rho": [float(x) for x in exp.rho],
        "provenance": exp.provenance.value,
        "agents": [a.name for a in agents],
        **result.to_json(),
    }
    return result, exp, log_


def typical_cases(store: MemoryStore, since: dt.date | None, until: dt.date) -> list[MemoryRecord]:
    """Reflections in (since, until] ordered by descending |P&L|, newer first on ties."""
    recs = [r for r in store if (since is None or r.timestamp > since) and r.timestamp <= until]
    return sorted(recs, key=lambda r: (-abs(float(r.metadata.get("pnl", "0"))), -r.timestamp.toordinal(), r.id))


def case_summary(rec: MemoryRecord) -> str:
    m = rec.metadata
    pnl = float(m.get("pnl", "0"))
    return (f"{m.get('action', '?')} on {m.get('symbol', '?')} ({m.get('decided_on', '?')}) "
            f"returned {pct(pnl)} over {m.get('horizon', '?')} days")


def rule_consolidate(case_text: str, discussion: Sequence[str]) -> str:
    lines = []
    for line in [case_text, *discussion]:
        if line and line not in lines:
            lines.append(line)
    return "\n".join(lines)


def run_esc(date: dt.date, agents: Sequence[tuple[AgentProfile, AgentMemory]], since: dt.date | None,
            embed: Callable[[str], Sequence[float]], rounds: int = 1, llm: LLM | None = None):
    """Share each agent's typical case and archive the consolidated lessons.

    Returns (new general-experience record ids, ConferenceLog).
    """
    log_ = ConferenceLog(date, ConferenceKind.ESC)
    new_ids: list[str] = []
    cases_by_agent = {p.name: typical_cases(mem.reflection, since, date) for p, mem in agents}
    for rnd in range(1, rounds + 1):
        presenting = [(p, mem, cases_by_agent[p.name][rnd - 1]) for p, mem in agents
                      if len(cases_by_agent[p.name]) >= rnd]
        for p, mem, case in presenting:
            discussion = [f"{q.name}: in my book, {case_summary(c)}."
                          for q, _, c in presenting if q.name != p.name]
            prompt = TEMPLATES[TemplateName.CONSOLIDATE].render({
                "date": date.isoformat(), "round": rnd, "presenter": p.name, "case": case.text,
                "discussion": "\n".join(discussion) if discussion else "No peer input.",
            })
            insight = rule_consolidate(case.text, discussion) if llm is None else llm(prompt).strip()
            if not insight:
                insight = rule_consolidate(case.text, discussion)
            log_.add(prompt, insight, p.name)
            rid = mem.general.add(date, insight, embed(insight),
                                  {"presenter": p.name, "case": case.id, "round": str(rnd)})
            new_ids.append(rid)
    log_.outcome = {"memory_ids": new_ids,
                    "abstained": [p.name for p, _ in agents if not cases_by_agent[p.name]]}
    return new_ids, log_


def detect_extreme(date: dt.date, data: Dataset, daily_threshold: float = DAILY_AMPLITUDE_THRESHOLD,
                   three_day_threshold: float = THREE_DAY_AMPLITUDE_THRESHOLD) -> list[tuple[AssetId, TriggerKind]]:
    """Assets whose bar on ``date`` breaches an amplitude threshold (strictly above)."""
    fired = []
    for asset in data.assets:
        if not data.has_bar(asset.symbol, date):
            continue
        window = data.bars(asset.symbol, until=date)[-4:]
        if len(window) >= 2 and daily_amplitude(window, data.amplitude_mode) > daily_threshold:
            fired.append((asset, TriggerKind.DAILY))
        if len(window) >= 4 and cumulative_amplitude_3d(window) > three_day_threshold:
            fired.append((asset, TriggerKind.THREE_DAY))
    return fired


@dataclass(frozen=True)
class CrisisBundle:
    crisis_agent: AgentProfile
    asset: AssetId
    triggers: tuple[TriggerKind, ...]
    direction: float
    market: str
    holdings: str
    cause: str
    plan: str
    manager_suggestion: str
    peer_suggestions: tuple[str, ...]
    position: float
    lambda3: float = DEFAULT_LAMBDA3

    def __post_init__(self):
        if not 0.0 <= self.lambda3 <= 1.0:
            raise ValueError("lambda3 must lie in [0, 1]")


def crisis_bundle(data: Dataset, date: dt.date, agent: AgentProfile, asset: AssetId,
                  triggers: Sequence[TriggerKind], plan: Action, position: float, holdings: str,
                  manager: AgentProfile, peers: Sequence[tuple[AgentProfile, bool]],
                  lambda3: float = DEFAULT_LAMBDA3) -> CrisisBundle:
    """Assemble the crisis context from rule-generated suggestions."""
    window = data.bars(asset.symbol, until=date)[-4:]
    amp = daily_amplitude(window, data.amplitude_mode)
    move1 = window[-1].close / window[-2].close - 1.0
    move3 = signed_move_3d(window) if len(window) >= 4 else move1
    direction = move3 if TriggerKind.THREE_DAY in triggers else move1
    b = window[-1]
    market = (f"{asset.symbol} open {b.open:.6g} high {b.high:.6g} low {b.low:.6g} close {b.close:.6g}; "
              f"daily amplitude {amp:.2%}, one-day move {pct(move1)}, three-day move {pct(move3)}")
    kinds = " and ".join("daily amplitude above 5%" if t is TriggerKind.DAILY else "three-day move above 10%"
                         for t in triggers)
    cause = f"{agent.name}: {asset.symbol} triggered {kinds}; the market is {'falling' if direction < 0 else 'rising'}."
    if direction < 0:
        s_b = (f"{manager.name}: the decline threatens the portfolio's tail-risk budget; cut exposure "
               "and avoid bottom-fishing.")
    else:
        s_b = f"{manager.name}: volatility is elevated; do not chase the move and keep position size unchanged."
    s_e = tuple(f"{p.name}: my book is {'invested' if held else 'flat'}; "
                f"{'trim risk while the move plays out' if direction < 0 else 'stay disciplined'}."
                for p, held in peers)
    plan_text = f"{plan.kind.value} ({plan.rationale})" if plan.rationale else plan.kind.value
    return CrisisBundle(agent, asset, tuple(triggers), direction, market, holdings, cause, plan_text,
                        s_b, s_e, position, lambda3)


def blend_suggestions(bundle: CrisisBundle) -> str:
    """Suggestion context weighted by lambda3; a zero weight drops its section."""
    sections = []
    w_own = 1.0 - bundle.lambda3
    if w_own > 0:
        sections.append(f"[Section A | weight {w_own:.2f}] Manager and crisis-agent analysis\n"
                        f"{bundle.manager_suggestion}\n{bundle.cause}")
    if bundle.lambda3 > 0:
        peers = "\n".join(bundle.peer_suggestions) if bundle.peer_suggestions else "No peer suggestions."
        sections.append(f"[Section B | weight {bundle.lambda3:.2f}] Peer suggestions\n{peers}")
    return "\n\n".join(sections)


def render_crisis(date: dt.date, bundle: CrisisBundle) -> str:
    return TEMPLATES[TemplateName.CRISIS].render({
        "date": date.isoformat(), "name": bundle.crisis_agent.name, "role": bundle.crisis_agent.role,
        "trigger": ", ".join(t.value for t in bundle.triggers), "market": bundle.market,
        "holdings": bundle.holdings, "plan": bundle.plan, "suggestions": blend_suggestions(bundle),
        "actions": ", ".join(k.value for k in ActionKind),
    })


def rule_crisis_response(bundle: CrisisBundle) -> str:
    if bundle.direction < 0 and bundle.position > 0:
        kind, why = ActionKind.SELL_HALF, "falling market while invested: halve the position"
    elif bundle.direction < 0:
        kind, why = ActionKind.HOLD, "falling market and already flat: avoid bottom-fishing"
    else:
        kind, why = ActionKind.HOLD, "rising but unstable market: do not chase"
    return json.dumps({"action": kind.value, "rationale": why})


def run_emc(date: dt.date, bundle: CrisisBundle, llm: LLM | None = None):
    """Re-decide the crisis agent's action. Returns ([Action], ConferenceLog)."""
    log_ = ConferenceLog(date, ConferenceKind.EMC)
    prompt = render_crisis(date, bundle)
    response = rule_crisis_response(bundle) if llm is None else llm(prompt)
    log_.add(prompt, response, bundle.crisis_agent.name)
    action = parse_decision(response, bundle.asset)
    log_.outcome = {"agent": bundle.crisis_agent.name, "symbol": bundle.asset.symbol,
                    "triggers": [t.value for t in bundle.triggers], "lambda3": bundle.lambda3,
                    "action": action.kind.value, "fallback": action.fallback}
    return [action], log_
