from __future__ import annotations

import datetime as dt
import json

import numpy as np
import pytest

from hedgeflow import allocator, conferences as cf
from hedgeflow.conferences import AnalystReport, ConferenceKind, Provenance, TriggerKind
from hedgeflow.gateway import Cassette, ChatRequest, Gateway
from hedgeflow.marketdata import Dataset
from hedgeflow.memory import AgentMemory, HashEmbedder, MemoryKind, MemoryStore
from hedgeflow.policy import ANALYSTS, MANAGER, Action, ActionKind, reflect
from emc_fixture import DATE, bundle
from helpers import BTC, DATA_DIR, bars_from

D = dt.date


def test_schedule_every_thirty_days():
    cal = [D(2021, 1, 1) + dt.timedelta(i) for i in range(120)]
    assert cf.bac_schedule(D(2021, 1, 1), D(2021, 4, 30), cal)[:4] == [
        D(2021, 1, 1), D(2021, 1, 31), D(2021, 3, 2), D(2021, 4, 1)]


def test_schedule_rolls_to_next_trading_day():
    cal = [d for d in (D(2021, 1, 1) + dt.timedelta(i) for i in range(60)) if d.weekday() < 5]
    # 2021-01-31 is a Sunday
    assert cf.bac_schedule(D(2021, 1, 1), D(2021, 3, 1), cal)[1] == D(2021, 2, 1)


def test_parse_rho_fixed_agent_order():
    rho = cf.parse_rho('{"emily":0.01,"dave":0.08,"bob":0.03}', ANALYSTS)
    np.testing.assert_allclose(rho, [0.08, 0.03, 0.01])
    assert cf.parse_rho("no json", ANALYSTS) is None
    np.testing.assert_allclose(cf.parse_rho('{"Dave":1,"Bob":2,"Emily":3}', ANALYSTS), [1, 2, 3])


def reports(n=3):
    return [AnalystReport(a, "flat", 0.0, "same") for a in ANALYSTS[:n]]


def bac_inputs(seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(0.0005, 0.01, (60, 3)) * np.array([3, 1, 0.5])
    return X.mean(0) * 30, np.cov(X, rowvar=False), X


def test_rule_bac_matches_allocator():
    rho, cov, X = bac_inputs()
    res, exp, log = cf.run_bac(D(2021, 1, 31), reports(), MANAGER, rho, cov, X)
    oracle = allocator.solve(allocator.AllocationProblem(rho, cov, X))
    np.testing.assert_allclose(res.weights.omega, oracle.weights.omega, atol=1e-12)
    grid = allocator.simplex_grid(3, 0.01)
    best = max(allocator.objective(w, allocator.AllocationProblem(rho, cov, X)) for w in grid)
    assert res.objective >= best - 1e-6
    assert exp.provenance is Provenance.RULE_ESTIMATED and log.kind is ConferenceKind.BAC
    assert log.transcript[0]["prompt"].startswith("TASK: BUDGET")


def test_llm_bac_uses_parsed_rho():
    rho, cov, X = bac_inputs()
    res, exp, _ = cf.run_bac(D(2021, 1, 31), reports(), MANAGER, rho, cov, X, 0, 0,
                             llm=lambda p: 'My view: {"dave":0.08,"bob":0.03,"emily":0.01}')
    assert exp.provenance is Provenance.LLM_PARSED
    np.testing.assert_allclose(res.weights.omega, [1, 0, 0], atol=1e-9)


def test_llm_bac_garbage_falls_back_to_rule():
    rho, cov, X = bac_inputs()
    _, exp, _ = cf.run_bac(D(2021, 1, 31), reports(), MANAGER, rho, cov, X, llm=lambda p: "I refuse")
    assert exp.provenance is Provenance.RULE_ESTIMATED
    np.testing.assert_allclose(exp.rho, rho)


def agents_with_reflections(counts, shared=True):
    emb = HashEmbedder(32)
    general = MemoryStore(MemoryKind.GENERAL_EXPERIENCE, 32, "shared") if shared else None
    out = []
    for prof, n in zip(ANALYSTS, counts):
        m = AgentMemory(prof.key, 32, general)
        for i in range(n):
            reflect(prof, Action(BTC, ActionKind.BUY_HALF, f"idea {i}"), 0.01 * (i + 1), 4, D(2021, 1, 2 + i),
                    D(2021, 1, 10 + i), m.reflection, emb)
        out.append((prof, m))
    return out, emb


def test_esc_one_round_three_records():
    agents, emb = agents_with_reflections([2, 1, 3])
    ids, log = cf.run_esc(D(2021, 1, 31), agents, D(2021, 1, 1), emb)
    assert len(ids) == 3 and len(agents[0][1].general) == 3
    assert log.outcome["abstained"] == []


def test_esc_empty_agent_abstains():
    agents, emb = agents_with_reflections([2, 0, 1])
    ids, log = cf.run_esc(D(2021, 1, 31), agents, None, emb)
    assert len(ids) == 2 and log.outcome["abstained"] == ["Bob"]


def test_esc_rule_consolidation_string():
    agents, emb = agents_with_reflections([1, 1, 1])
    _, log = cf.run_esc(D(2021, 1, 31), agents, None, emb)
    cases = {p.name: m.reflection[0] for p, m in agents}
    first = log.transcript[0]
    want_lines = [cases["Dave"].text] + [f"{q}: in my book, {cf.case_summary(cases[q])}." for q in ("Bob", "Emily")]
    assert first["response"] == "\n".join(want_lines)


def test_esc_typical_case_is_largest_abs_pnl():
    agents, _ = agents_with_reflections([3, 0, 0])
    top = cf.typical_cases(agents[0][1].reflection, None, D(2021, 2, 1))[0]
    assert top.metadata["pnl"] == repr(0.03)


def test_rule_consolidate_dedups():
    assert cf.rule_consolidate("a", ["b", "a", "b", "c"]) == "a\nb\nc"


def amp_ds(closes, highs=None, lows=None):
    bars = bars_from(closes)
    if highs is not None:
        bars = [type(b)(b.date, b.open, max(b.high, h), min(b.low, lo), b.close, b.adj_close, b.volume)
                for b, h, lo in zip(bars, highs, lows)]
    return Dataset({BTC: bars}, indicator_names=())


def test_daily_trigger_fires_at_six_percent():
    ds = amp_ds([100, 100], [100, 104], [100, 98])
    assert cf.detect_extreme(D(2021, 1, 2), ds) == [(BTC, TriggerKind.DAILY)]


def test_three_day_trigger_on_1022_decline():
    ds = amp_ds([100, 97, 93, 89.78])
    assert (BTC, TriggerKind.THREE_DAY) in cf.detect_extreme(D(2021, 1, 4), ds)


def test_below_thresholds_no_trigger():
    bars = bars_from([100, 101, 102, 109])
    last = bars[-1]
    bars[-1] = type(last)(last.date, 105.0, 109.0, 109.0 - 0.049 * 102, 109.0, 109.0, 1.0)
    ds = Dataset({BTC: bars}, indicator_names=())
    assert daily_and_3d(ds) == (pytest.approx(0.049), pytest.approx(0.09))
    assert cf.detect_extreme(D(2021, 1, 4), ds) == []


def daily_and_3d(ds):
    from hedgeflow.marketdata import cumulative_amplitude_3d, daily_amplitude
    w = ds.bars("BTC")
    return daily_amplitude(w), cumulative_amplitude_3d(w)


def test_blend_boundaries():
    zero = cf.blend_suggestions(bundle(0.0))
    assert "Section A" in zero and "Section B" not in zero and "Bob:" not in zero
    one = cf.blend_suggestions(bundle(1.0))
    assert "Section B" in one and "Section A" not in one and "Otto:" not in one


def test_lambda3_out_of_range():
    with pytest.raises(ValueError):
        bundle(1.5)


def test_crisis_prompt_matches_golden():
    golden = (DATA_DIR / "emc_lambda3_0.5.golden.txt").read_text(encoding="utf-8")
    assert cf.render_crisis(DATE, bundle(0.5)) == golden


def test_replayed_crisis_backend_sells_half():
    gw = Gateway("http://unused", None, Cassette.open(DATA_DIR / "emc_cassette.jsonl", "replay"))
    actions, log = cf.run_emc(DATE, bundle(0.5), lambda p: gw.chat(ChatRequest.user(p, temperature=0.0)))
    assert [a.kind for a in actions] == [ActionKind.SELL_HALF]
    assert gw.network_calls == 0
    assert log.outcome["action"] == "SELL_HALF"


def test_rule_crisis_flat_book_holds():
    b = bundle(0.5)
    flat = type(b)(**{**b.__dict__, "position": 0.0})
    assert json.loads(cf.rule_crisis_response(flat))["action"] == "HOLD"
