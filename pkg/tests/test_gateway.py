from __future__ import annotations

import json

import httpx
import pytest

from hedgeflow.errors import DeterminismViolation, GatewayError
from hedgeflow.gateway import Cassette, CassetteMode, ChatRequest, Gateway, canonical_json, fingerprint
from hedgeflow.memory import MemoryKind, MemoryStore
import datetime as dt

URL = "http://llm.test/v1"


class Fake:
    """Chat/embedding server that answers deterministically and counts requests."""

    def __init__(self, fail_first: int = 0, status: int = 500):
        self.calls = 0
        self.fail_first = fail_first
        self.status = status

    def __call__(self, request: httpx.Request) -> httpx.Response:
        self.calls += 1
        if self.calls <= self.fail_first:
            return httpx.Response(self.status, text="busy")
        body = json.loads(request.content)
        if request.url.path.endswith("/embeddings"):
            n = len(body["input"])
            return httpx.Response(200, json={"data": [{"embedding": [float(n), 1.0, 0.0]}],
                                             "usage": {"prompt_tokens": 3}})
        prompt = body["messages"][-1]["content"]
        return httpx.Response(200, json={
            "choices": [{"message": {"content": f"echo:{prompt}"}}],
            "usage": {"prompt_tokens": 10, "completion_tokens": 2}})


def gw(mode, tmp_path, fake=None, **kw):
    fake = fake or Fake()
    cas = Cassette.open(tmp_path / "c.jsonl", mode) if mode is CassetteMode.REPLAY else Cassette(mode, tmp_path / "c.jsonl")
    return Gateway(URL, "k", cas, httpx.MockTransport(fake), sleep=lambda s: None, **kw), fake


def test_fingerprint_ignores_key_order():
    a = fingerprint("chat/completions", "m", {"a": 1, "b": [1, 2]})
    b = fingerprint("chat/completions", "m", {"b": [1, 2], "a": 1})
    assert a == b and len(a) == 64
    assert canonical_json({"b": 1, "a": 2}) == '{"a":2,"b":1}'


def test_fingerprint_depends_on_temperature():
    r1 = ChatRequest.user("hi", temperature=0.7).body()
    r2 = ChatRequest.user("hi", temperature=0.0).body()
    assert fingerprint("chat/completions", "m", r1) != fingerprint("chat/completions", "m", r2)


def test_record_then_replay(tmp_path):
    g, fake = gw(CassetteMode.RECORD, tmp_path)
    out = [g.chat(ChatRequest.user(p)) for p in ("a", "b", "a")]
    assert out == ["echo:a", "echo:b", "echo:a"]
    assert fake.calls == 2  # repeated request served from cassette
    g.cassette.save()
    r, fake2 = gw(CassetteMode.REPLAY, tmp_path)
    assert [r.chat(ChatRequest.user(p)) for p in ("a", "b", "a")] == out
    assert fake2.calls == 0 and r.network_calls == 0
    assert r.usage == g.usage


def test_replay_mismatch_raises(tmp_path):
    g, _ = gw(CassetteMode.RECORD, tmp_path)
    g.chat(ChatRequest.user("a"))
    g.cassette.save()
    r, _ = gw(CassetteMode.REPLAY, tmp_path)
    with pytest.raises(DeterminismViolation):
        r.chat(ChatRequest.user("altered"))


def test_replay_past_end_raises(tmp_path):
    g, _ = gw(CassetteMode.RECORD, tmp_path)
    g.cassette.save()
    r, _ = gw(CassetteMode.REPLAY, tmp_path)
    with pytest.raises(DeterminismViolation):
        r.chat(ChatRequest.user("a"))


def test_missing_cassette_in_replay(tmp_path):
    with pytest.raises(GatewayError):
        Cassette.open(tmp_path / "nope.jsonl", "replay")


def test_retries_then_succeeds(tmp_path):
    waits = []
    fake = Fake(fail_first=2, status=429)
    g = Gateway(URL, "k", Cassette(CassetteMode.PASSTHROUGH), httpx.MockTransport(fake), sleep=waits.append,
                backoff=0.5)
    assert g.chat(ChatRequest.user("x")) == "echo:x"
    assert waits == [0.5, 1.0]


def test_gives_up_after_retries(tmp_path):
    fake = Fake(fail_first=100)
    g = Gateway(URL, "k", Cassette(CassetteMode.PASSTHROUGH), httpx.MockTransport(fake), sleep=lambda s: None,
                max_retries=2)
    with pytest.raises(GatewayError):
        g.chat(ChatRequest.user("x"))
    assert fake.calls == 3


def test_client_error_not_retried():
    fake = Fake(fail_first=100, status=400)
    g = Gateway(URL, "k", None, httpx.MockTransport(fake), sleep=lambda s: None)
    with pytest.raises(GatewayError):
        g.chat(ChatRequest.user("x"))
    assert fake.calls == 1


def test_no_url_is_an_error(monkeypatch):
    monkeypatch.delenv("HEDGE_LLM_URL", raising=False)
    with pytest.raises(GatewayError):
        Gateway().chat(ChatRequest.user("x"))


def test_embedding_record_replay_and_norm(tmp_path):
    g, fake = gw(CassetteMode.RECORD, tmp_path)
    v1 = g.embed_remote("abcd")
    v2 = g.embed_remote("abcd")
    assert fake.calls == 1 and v1 == v2
    assert sum(x * x for x in v1) == pytest.approx(1.0)
    g.cassette.save()
    r, _ = gw(CassetteMode.REPLAY, tmp_path)
    assert r.embed_remote("abcd") == v1


def test_embedding_dimension_checked_at_insertion(tmp_path):
    g, _ = gw(CassetteMode.PASSTHROUGH, tmp_path)
    store = MemoryStore(MemoryKind.MARKET_INFORMATION, 64)
    from hedgeflow.errors import DimensionMismatchError
    with pytest.raises(DimensionMismatchError):
        store.add(dt.date(2021, 1, 1), "t", g.embed_remote("t"))


def test_usage_accounting(tmp_path):
    g, _ = gw(CassetteMode.PASSTHROUGH, tmp_path, prices={"m": (1.0, 2.0)})
    g.chat(ChatRequest.user("x", model="m"))
    assert g.usage == {"calls": 1, "in": 10, "out": 2, "cost": pytest.approx(0.014)}


def test_bad_request_validation():
    with pytest.raises(ValueError):
        ChatRequest("m", ({"role": "robot", "content": "x"},), 0.7)
