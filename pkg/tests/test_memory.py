from __future__ import annotations

import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hedgeflow.errors import DimensionMismatchError, TemporalGatingError
from hedgeflow.memory import (
    AgentMemory,
    HashEmbedder,
    MemoryKind,
    MemoryRecord,
    MemoryStore,
    Query,
    retrieve,
)

D = dt.date(2021, 3, 1)
MI = MemoryKind.MARKET_INFORMATION


def brute_force(records, q, k, as_of=None):
    """Independent oracle: plain-Python cosine, newest first on ties, then id."""
    def cos(a, b):
        na = math.sqrt(sum(x * x for x in a))
        nb = math.sqrt(sum(x * x for x in b))
        return 0.0 if na == 0 or nb == 0 else sum(x * y for x, y in zip(a, b)) / (na * nb)

    pool = [r for r in records if as_of is None or r.timestamp <= as_of]
    pool.sort(key=lambda r: (-cos(r.embedding, q), -r.timestamp.toordinal(), r.id))
    return [r.id for r in pool[:k]]


def random_store(rng, n, dim=8, kind=MI, owner="a"):
    s = MemoryStore(kind, dim, owner)
    for i in range(n):
        s.add(D + dt.timedelta(int(rng.integers(0, 30))), f"r{i}", tuple(rng.normal(size=dim)))
    return s


def test_insert_counts_and_ids():
    s = MemoryStore(MI, 3)
    s.add(D, "same", (1, 0, 0))
    assert len(s) == 1
    s.add(D, "same", (1, 0, 0))
    assert len(s) == 2 and s[0].id != s[1].id


def test_insert_after_clock_rejected():
    s = MemoryStore(MI, 3)
    s.clock = D
    with pytest.raises(TemporalGatingError):
        s.add(D + dt.timedelta(1), "x", (1, 0, 0))


def test_dimension_checked_on_insert():
    s = MemoryStore(MI, 3)
    with pytest.raises(DimensionMismatchError):
        s.add(D, "x", (1, 0))


def test_self_similarity_ranks_first():
    rng = np.random.default_rng(0)
    s = random_store(rng, 10)
    target = s[4]
    got = retrieve([s], Query("q", target.embedding, 5))
    assert got[0].id == target.id


def test_k_larger_than_store():
    s = random_store(np.random.default_rng(1), 3)
    assert len(retrieve([s], Query("q", (1.0,) * 8, 5))) == 3


def test_ten_records_match_oracle():
    rng = np.random.default_rng(2)
    s = random_store(rng, 10)
    q = tuple(rng.normal(size=8))
    assert [r.id for r in retrieve([s], Query("q", q, 5))] == brute_force(list(s), q, 5)


def test_ties_prefer_newer_then_id():
    s = MemoryStore(MI, 2)
    s.add(D, "old", (1, 0))
    s.add(D + dt.timedelta(2), "new", (2, 0))
    s.add(D + dt.timedelta(2), "new2", (3, 0))
    got = retrieve([s], Query("q", (1, 0), 3))
    assert [r.text for r in got] == ["new", "new2", "old"]


def test_as_of_hides_future_records():
    s = MemoryStore(MI, 2)
    s.add(D, "past", (1, 0))
    s.add(D + dt.timedelta(5), "future", (1, 0))
    got = retrieve([s], Query("q", (1, 0), 5, as_of=D))
    assert [r.text for r in got] == ["past"]


def test_agent_memory_pools_all_tiers():
    m = AgentMemory("dave", 2)
    m.market.add(D, "mi", (1, 0))
    m.reflection.add(D, "ir", (0.9, 0.1))
    m.general.add(D, "ge", (0, 1))
    got = m.retrieve(Query("q", (1, 0), 2))
    assert [r.kind for r in got] == [MemoryKind.MARKET_INFORMATION, MemoryKind.INVESTMENT_REFLECTION]


def test_quota_limits_each_kind():
    m = AgentMemory("dave", 2)
    for i in range(4):
        m.market.add(D, f"mi{i}", (1, 0.01 * i))
    m.reflection.add(D, "ir", (0, 1))
    got = m.retrieve(Query("q", (1, 0), 3), quota={MemoryKind.MARKET_INFORMATION: 2})
    assert sum(r.kind is MemoryKind.MARKET_INFORMATION for r in got) <= 2


def test_dump_load_roundtrip(tmp_path):
    s = random_store(np.random.default_rng(3), 5)
    s[0].metadata  # touch
    s.dump(tmp_path / "m.jsonl")
    back = MemoryStore.load(tmp_path / "m.jsonl", MI, 8, "a")
    assert [r.to_json() for r in back] == [r.to_json() for r in s]
    assert back.next_id() == s.next_id()


def test_record_json_roundtrip():
    r = MemoryRecord("a/MI/000000", MI, D, "t", (0.5, 0.5), {"k": "v"})
    assert MemoryRecord.from_json(r.to_json()) == r


def test_embedder_deterministic_and_unit():
    e = HashEmbedder(64, 0)
    a, b = e("Bitcoin rallied 5% today"), e("Bitcoin rallied 5% today")
    assert a == b
    assert math.isclose(float(np.linalg.norm(a)), 1.0, abs_tol=1e-9)


def test_embedder_rejects_empty():
    with pytest.raises(ValueError):
        HashEmbedder()("  ")


CORPUS = [
    "bitcoin surges after etf approval", "dow jones slips on rate fears", "euro weakens against dollar",
    "oil prices climb on supply cuts", "gold steady as investors wait", "tech stocks lead market rally",
    "central bank holds rates unchanged", "crypto exchange hit by outage", "bond yields rise sharply",
    "retail sales beat expectations", "inflation cools for third month", "yen rallies on safe haven demand",
    "miners expand hash rate capacity", "earnings season kicks off strongly", "forex volatility near lows",
    "sell half position after decline", "buy quarter on breakout", "hold through the storm",
    "manager cuts crypto budget", "analyst reflects on losing trade",
]


def test_unrelated_texts_are_distinct():
    e = HashEmbedder(64, 0)
    vecs = np.array([e(t) for t in CORPUS])
    sims = vecs @ vecs.T
    np.fill_diagonal(sims, -1)
    assert sims.max() < 0.99


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 200), st.sampled_from([1, 5, 200]), st.integers(0, 2 ** 31))
def test_retrieve_matches_brute_force(n, k, seed):
    rng = np.random.default_rng(seed)
    s = random_store(rng, n, dim=6)
    q = tuple(rng.normal(size=6))
    as_of = D + dt.timedelta(int(rng.integers(0, 30)))
    assert [r.id for r in retrieve([s], Query("q", q, k, as_of))] == brute_force(list(s), q, k, as_of)
