"""Per-agent memory tiers with cosine top-k retrieval."""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from hedgeflow.errors import DimensionMismatchError, HedgeflowError, TemporalGatingError

DEFAULT_TOP_K = 5


class MemoryKind(str, Enum):
    MARKET_INFORMATION = "MarketInformation"
    INVESTMENT_REFLECTION = "InvestmentReflection"
    GENERAL_EXPERIENCE = "GeneralExperience"

    @property
    def short(self) -> str:
        return {"MarketInformation": "MI", "InvestmentReflection": "IR", "GeneralExperience": "GE"}[self.value]


@dataclass(frozen=True)
class MemoryRecord:
    id: str
    kind: MemoryKind
    timestamp: dt.date
    text: str
    embedding: tuple[float, ...]
    metadata: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind.value,
            "timestamp": self.timestamp.isoformat(),
            "text": self.text,
            "embedding": list(self.embedding),
            "metadata": dict(sorted(self.metadata.items())),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "MemoryRecord":
        return cls(obj["id"], MemoryKind(obj["kind"]), dt.date.fromisoformat(obj["timestamp"]),
                   obj["text"], tuple(float(x) for x in obj["embedding"]), dict(obj.get("metadata", {})))


@dataclass(frozen=True)
class Query:
    text: str
    embedding: tuple[float, ...]
    k: int = DEFAULT_TOP_K
    as_of: dt.date | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


class MemoryStore:
    """Append-only store of one memory kind.

    ``clock`` is the engine date; records stamped after it are rejected.
    """

    def __init__(self, kind: MemoryKind, dim: int, owner: str = "agent"):
        self.kind = kind
        self.dim = dim
        self.owner = owner
        self.clock: dt.date | None = None
        self._records: list[MemoryRecord] = []
        self._ids: set[str] = set()
        self._buf = np.zeros((16, dim))
        self._ords = np.zeros(16, dtype=np.int64)

    def __len__(self):
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def __getitem__(self, i) -> MemoryRecord:
        return self._records[i]

    @property
    def records(self) -> list[MemoryRecord]:
        return list(self._records)

    def next_id(self) -> str:
        return f"{self.owner}/{self.kind.short}/{len(self._records):06d}"

    def add(self, timestamp: dt.date, text: str, embedding: Sequence[float],
            metadata: dict[str, str] | None = None) -> str:
        rec = MemoryRecord(self.next_id(), self.kind, timestamp, text,
                           tuple(float(x) for x in embedding), dict(metadata or {}))
        return self.insert(rec)

    def insert(self, record: MemoryRecord) -> str:
        if len(record.embedding) != self.dim:
            raise DimensionMismatchError(
                f"store {self.owner}/{self.kind.short} expects dimension {self.dim}, got {len(record.embedding)}")
        if record.kind is not self.kind:
            raise HedgeflowError(f"record kind {record.kind.value} does not belong in {self.kind.value} store")
        if self.clock is not None and record.timestamp > self.clock:
            raise TemporalGatingError(f"record dated {record.timestamp} is after engine clock {self.clock}")
        if record.id in self._ids:
            raise HedgeflowError(f"duplicate memory id {record.id}")
        self._records.append(record)
        self._ids.add(record.id)
        n = len(self._records)
        if n > len(self._buf):
            grown = np.zeros((2 * len(self._buf), self.dim))
            grown[:len(self._buf)] = self._buf
            self._buf = grown
            self._ords = np.concatenate([self._ords, np.zeros(len(self._ords), dtype=np.int64)])
        self._buf[n - 1] = record.embedding
        self._ords[n - 1] = record.timestamp.toordinal()
        return record.id

    def matrix(self) -> np.ndarray:
        return self._buf[:len(self._records)]

    def ordinals(self) -> np.ndarray:
        return self._ords[:len(self._records)]

    def dump(self, path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            for r in self._records:
                fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path, kind: MemoryKind, dim: int, owner: str = "agent") -> "MemoryStore":
        store = cls(kind, dim, owner)
        with Path(path).open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    store.insert(MemoryRecord.from_json(json.loads(line)))
        return store


def _cosines(matrix: np.ndarray, q: np.ndarray) -> np.ndarray:
    # row-wise reductions keep each score independent of its row position
    qn = np.sqrt((q * q).sum())
    rn = np.sqrt((matrix * matrix).sum(axis=1))
    dots = (matrix * q[None, :]).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        sims = dots / (rn * qn)
    return np.where(np.isfinite(sims), sims, 0.0)


def retrieve(stores: Iterable[MemoryStore], query: Query,
             quota: dict[MemoryKind, int] | None = None) -> list[MemoryRecord]:
    """Top-k records across ``stores`` by descending cosine similarity.

    Ties go to the newer record, then to the lexicographically smaller id.
    Records dated after ``query.as_of`` are invisible. With ``quota`` each kind
    contributes at most its quota before the pooled cut to k.
    """
    q = np.asarray(query.embedding, dtype=float)
    scored: list[tuple[float, int, str, MemoryRecord]] = []
    for store in stores:
        if not len(store):
            continue
        if store.dim != len(q):
            raise DimensionMismatchError(f"query dimension {len(q)} != store dimension {store.dim}")
        records = store._records
        neg = -_cosines(store.matrix(), q)
        if query.as_of is not None:
            neg = np.where(store.ordinals() <= query.as_of.toordinal(), neg, np.inf)
        idx = np.flatnonzero(np.isfinite(neg))
        if not quota and len(idx) > query.k:
            # keep everything tied with the k-th best so tie-breaks stay exact
            cut = np.partition(neg[idx], query.k - 1)[query.k - 1]
            idx = idx[neg[idx] <= cut]
        part = [(float(neg[i]), -records[i].timestamp.toordinal(), records[i].id, records[i]) for i in idx]
        if quota and store.kind in quota:
            part.sort(key=lambda t: t[:3])
            part = part[:quota[store.kind]]
        scored.extend(part)
    scored.sort(key=lambda t: t[:3])
    return [t[3] for t in scored[:query.k]]


class AgentMemory:
    """The three tiers visible to one analyst. ``general`` may be shared."""

    def __init__(self, owner: str, dim: int, general: MemoryStore | None = None):
        self.owner = owner
        self.dim = dim
        self.market = MemoryStore(MemoryKind.MARKET_INFORMATION, dim, owner)
        self.reflection = MemoryStore(MemoryKind.INVESTMENT_REFLECTION, dim, owner)
        self.general = general if general is not None else MemoryStore(MemoryKind.GENERAL_EXPERIENCE, dim, owner)

    @property
    def stores(self) -> tuple[MemoryStore, MemoryStore, MemoryStore]:
        return self.market, self.reflection, self.general

    def set_clock(self, date: dt.date) -> None:
        for s in self.stores:
            s.clock = date

    def retrieve(self, query: Query, quota=None) -> list[MemoryRecord]:
        return retrieve(self.stores, query, quota)


_TOKEN = re.compile(r"[a-z0-9]+(?:\.[0-9]+)?%?")


class HashEmbedder:
    """Deterministic offline embedder: seeded token and bigram hashing, L2-normalised."""

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def _bucket(self, token: str) -> tuple[int, float]:
        h = hashlib.blake2b(f"{self.seed}:{token}".encode(), digest_size=8).digest()
        n = int.from_bytes(h, "little")
        return n % self.dim, (1.0 if (n >> 32) & 1 else -1.0)

    def embed(self, text: str) -> tuple[float, ...]:
        if not text or not text.strip():
            raise ValueError("cannot embed empty text")
        tokens = _TOKEN.findall(text.lower()) or [text]
        v = np.zeros(self.dim)
        for tok in tokens:
            i, s = self._bucket(tok)
            v[i] += s
        for a, b in zip(tokens, tokens[1:]):
            i, s = self._bucket(a + " " + b)
            v[i] += 0.5 * s
        norm = np.linalg.norm(v)
        if norm == 0.0:
            i, _ = self._bucket(text)
            v[i] = 1.0
            norm = 1.0
        return tuple(float(x) for x in v / norm)

    __call__ = embed


Embedder = Callable[[str], Sequence[float]]
