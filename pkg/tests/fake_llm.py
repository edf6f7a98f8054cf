"""In-process chat server that answers each prompt type deterministically."""

from __future__ import annotations

import hashlib
import json

import httpx

DECISIONS = ["HOLD", "BUY_QUARTER", "BUY_HALF", "SELL_QUARTER", "SELL_HALF", "HOLD", "BUY_ALL", "SELL_ALL"]


def _h(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def answer(prompt: str) -> str:
    task = prompt.split("\n", 1)[0]
    h = _h(prompt)
    if task == "TASK: DECISION":
        if h % 17 == 0:
            return "I am not sure."  # exercises the fallback path
        return f'Decision follows. {{"action": "{DECISIONS[h % len(DECISIONS)]}", "rationale": "signal {h % 97}"}}'
    if task == "TASK: BUDGET":
        vals = {k: ((h >> (8 * i)) % 200 - 80) / 2000 for i, k in enumerate(("dave", "bob", "emily"))}
        return json.dumps(vals)
    if task == "TASK: CONSOLIDATE":
        return f"Lesson {h % 1000}: size positions to conviction and respect the stop."
    if task == "TASK: CRISIS":
        return '{"action": "SELL_HALF", "rationale": "de-risk into the shock"}'
    return "unknown task"


class FakeLLM:
    def __init__(self):
        self.calls = 0

    def __call__(self, request: httpx.Request) -> httpx.Response:
        self.calls += 1
        body = json.loads(request.content)
        prompt = body["messages"][-1]["content"]
        return httpx.Response(200, json={
            "choices": [{"message": {"content": answer(prompt)}}],
            "usage": {"prompt_tokens": len(prompt) // 4, "completion_tokens": 20},
        })

    def transport(self) -> httpx.MockTransport:
        return httpx.MockTransport(self)


class CountingTransport(httpx.BaseTransport):
    """Fails loudly if anything reaches the network."""

    def __init__(self):
        self.calls = 0

    def handle_request(self, request):
        self.calls += 1
        raise httpx.ConnectError("network disabled in replay", request=request)
