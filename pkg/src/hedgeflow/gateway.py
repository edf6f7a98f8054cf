"""Chat-completion and embedding client with record/replay cassettes.

Cassettes are ordered: replay hands out entries strictly in sequence and any
fingerprint mismatch is a :class:`DeterminismViolation`, so a change in call
order surfaces as an error instead of a silently reused response.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import httpx
import numpy as np

from hedgeflow.errors import DeterminismViolation, GatewayError

log = logging.getLogger(__name__)

CHAT_ENDPOINT = "chat/completions"
EMBED_ENDPOINT = "embeddings"
DEFAULT_MODEL = "gpt-4-1106-preview"
DEFAULT_EMBED_MODEL = "text-embedding-3-large"
DEFAULT_TEMPERATURE = 0.7
ROLES = ("system", "user", "assistant")


class CassetteMode(str, Enum):
    RECORD = "record"
    REPLAY = "replay"
    PASSTHROUGH = "passthrough"


@dataclass(frozen=True)
class ChatRequest:
    model: str
    messages: tuple[dict, ...]
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if not self.messages:
            raise ValueError("chat request needs at least one message")
        for m in self.messages:
            if m.get("role") not in ROLES:
                raise ValueError(f"invalid role {m.get('role')!r}")
            if not isinstance(m.get("content"), str):
                raise ValueError("message content must be text")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError("temperature must lie in [0, 2]")

    @classmethod
    def user(cls, prompt: str, model: str = DEFAULT_MODEL, temperature: float = DEFAULT_TEMPERATURE,
             system: str | None = None) -> "ChatRequest":
        msgs = ([{"role": "system", "content": system}] if system else []) + [{"role": "user", "content": prompt}]
        return cls(model, tuple(msgs), temperature)

    def body(self) -> dict:
        return {"model": self.model,
                "messages": [{"role": m["role"], "content": m["content"]} for m in self.messages],
                "temperature": self.temperature}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def fingerprint(endpoint: str, model: str, body: dict) -> str:
    payload = canonical_json({"endpoint": endpoint, "model": model, "body": body})
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass
class CassetteEntry:
    fingerprint: str
    request: dict
    response: str
    tokens: dict = field(default_factory=lambda: {"in": 0, "out": 0})

    def to_json(self) -> dict:
        return {"fingerprint": self.fingerprint, "request": self.request,
                "response": self.response, "tokens": self.tokens}


class Cassette:
    def __init__(self, mode: CassetteMode = CassetteMode.REPLAY, path=None,
                 entries: list[CassetteEntry] | None = None):
        self.mode = CassetteMode(mode)
        self.path = Path(path) if path else None
        self.entries: list[CassetteEntry] = list(entries or [])
        self.cursor = 0
        self._by_fp: dict[str, CassetteEntry] = {}
        for e in self.entries:
            self._by_fp.setdefault(e.fingerprint, e)

    @classmethod
    def open(cls, path, mode: CassetteMode | str) -> "Cassette":
        mode = CassetteMode(mode)
        path = Path(path)
        entries = []
        if mode is CassetteMode.REPLAY:
            if not path.exists():
                raise GatewayError(f"cassette {path} not found")
            with path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        o = json.loads(line)
                        entries.append(CassetteEntry(o["fingerprint"], o["request"], o["response"],
                                                     o.get("tokens", {"in": 0, "out": 0})))
        return cls(mode, path, entries)

    def next_for(self, fp: str) -> CassetteEntry:
        if self.cursor >= len(self.entries):
            raise DeterminismViolation(None, fp)
        entry = self.entries[self.cursor]
        if entry.fingerprint != fp:
            raise DeterminismViolation(entry.fingerprint, fp)
        self.cursor += 1
        return entry

    def cached(self, fp: str) -> CassetteEntry | None:
        return self._by_fp.get(fp)

    def append(self, entry: CassetteEntry) -> None:
        self.entries.append(entry)
        self._by_fp.setdefault(entry.fingerprint, entry)

    def save(self, path=None) -> None:
        path = Path(path) if path else self.path
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for e in self.entries:
                fh.write(canonical_json(e.to_json()) + "\n")


# USD per 1k tokens (input, output)
DEFAULT_PRICES = {
    "gpt-4-1106-preview": (0.01, 0.03),
    "text-embedding-3-large": (0.00013, 0.0),
}


class Gateway:
    """Transport for every model call the engine makes.

    ``transport`` is any ``httpx.BaseTransport``; tests pass an
    ``httpx.MockTransport`` or a counting fake.
    """

    def __init__(self, base_url: str | None = None, api_key: str | None = None,
                 cassette: Cassette | None = None, transport: httpx.BaseTransport | None = None,
                 max_retries: int = 3, backoff: float = 0.5, timeout: float = 60.0,
                 sleep: Callable[[float], None] = time.sleep, prices: dict | None = None,
                 embed_model: str = DEFAULT_EMBED_MODEL):
        self.base_url = base_url if base_url is not None else os.environ.get("HEDGE_LLM_URL")
        self.api_key = api_key if api_key is not None else os.environ.get("HEDGE_LLM_KEY")
        self.cassette = cassette or Cassette(CassetteMode.PASSTHROUGH)
        self.max_retries = max_retries
        self.backoff = backoff
        self.sleep = sleep
        self.prices = dict(DEFAULT_PRICES if prices is None else prices)
        self.embed_model = embed_model
        self._transport = transport
        self._timeout = timeout
        self._client: httpx.Client | None = None
        self._lock = threading.Lock()
        self.network_calls = 0
        self.usage = {"calls": 0, "in": 0, "out": 0, "cost": 0.0}

    @property
    def mode(self) -> CassetteMode:
        return self.cassette.mode

    def _http(self) -> httpx.Client:
        if self._client is None:
            headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
            self._client = httpx.Client(transport=self._transport, timeout=self._timeout, headers=headers)
        return self._client

    def close(self) -> None:
        if self._client is not None:
            self._client.close()
            self._client = None

    def _post(self, endpoint: str, body: dict) -> dict:
        if not self.base_url:
            raise GatewayError("no endpoint configured (set HEDGE_LLM_URL)")
        url = self.base_url.rstrip("/") + "/" + endpoint
        last: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            self.network_calls += 1
            try:
                resp = self._http().post(url, json=body)
            except httpx.TransportError as exc:
                last = exc
                log.warning("gateway transport error on %s (attempt %d): %s", endpoint, attempt + 1, exc)
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = GatewayError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                log.warning("gateway %s returned %d (attempt %d)", endpoint, resp.status_code, attempt + 1)
                continue
            if resp.status_code >= 400:
                raise GatewayError(f"{endpoint}: HTTP {resp.status_code}: {resp.text[:500]}")
            try:
                return resp.json()
            except ValueError as exc:
                raise GatewayError(f"{endpoint}: response is not JSON: {exc}") from None
        raise GatewayError(f"{endpoint}: giving up after {self.max_retries + 1} attempts: {last}")

    def _account(self, model: str, tokens: dict) -> None:
        self.usage["calls"] += 1
        self.usage["in"] += int(tokens.get("in", 0))
        self.usage["out"] += int(tokens.get("out", 0))
        pin, pout = self.prices.get(model, (0.0, 0.0))
        self.usage["cost"] += tokens.get("in", 0) / 1000 * pin + tokens.get("out", 0) / 1000 * pout

    def _exchange(self, endpoint: str, model: str, body: dict, extract) -> str:
        fp = fingerprint(endpoint, model, body)
        with self._lock:
            cas = self.cassette
            if cas.mode is CassetteMode.REPLAY:
                entry = cas.next_for(fp)
            elif cas.mode is CassetteMode.RECORD and cas.cached(fp) is not None:
                hit = cas.cached(fp)
                entry = CassetteEntry(fp, body, hit.response, {"in": 0, "out": 0})
                cas.append(entry)
            else:
                raw = self._post(endpoint, body)
                text, tokens = extract(raw)
                entry = CassetteEntry(fp, body, text, tokens)
                if cas.mode is CassetteMode.RECORD:
                    cas.append(entry)
            self._account(model, entry.tokens)
            return entry.response

    def chat(self, request: ChatRequest) -> str:
        def extract(raw):
            try:
                text = raw["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError):
                raise GatewayError(f"malformed chat response: {str(raw)[:200]}") from None
            u = raw.get("usage") or {}
            return text or "", {"in": int(u.get("prompt_tokens", 0)), "out": int(u.get("completion_tokens", 0))}

        return self._exchange(CHAT_ENDPOINT, request.model, request.body(), extract)

    def embed_remote(self, text: str, model: str | None = None) -> tuple[float, ...]:
        model = model or self.embed_model

        def extract(raw):
            try:
                vec = raw["data"][0]["embedding"]
            except (KeyError, IndexError, TypeError):
                raise GatewayError(f"malformed embedding response: {str(raw)[:200]}") from None
            u = raw.get("usage") or {}
            return json.dumps([float(x) for x in vec]), {"in": int(u.get("prompt_tokens", 0)), "out": 0}

        body = {"model": model, "input": text}
        v = np.asarray(json.loads(self._exchange(EMBED_ENDPOINT, model, body, extract)), dtype=float)
        norm = np.linalg.norm(v)
        if norm == 0.0:
            raise GatewayError("embedding endpoint returned a zero vector")
        return tuple(float(x) for x in v / norm)
