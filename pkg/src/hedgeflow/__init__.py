"""Multi-agent hedge fund backtester with memory, conferences and risk-budgeted allocation."""

from __future__ import annotations

__version__ = "0.1.0"

from hedgeflow.allocator import AllocationProblem, Weights, optimize, solve
from hedgeflow.engine import Engine, RunConfig, load_config, run
from hedgeflow.marketdata import AssetClass, AssetId, Bar, Dataset, MarketSnapshot
from hedgeflow.memory import AgentMemory, HashEmbedder, MemoryKind, MemoryRecord, MemoryStore, Query, retrieve

__all__ = [
    "AgentMemory", "AllocationProblem", "AssetClass", "AssetId", "Bar", "Dataset", "Engine",
    "HashEmbedder", "MarketSnapshot", "MemoryKind", "MemoryRecord", "MemoryStore", "Query",
    "RunConfig", "Weights", "load_config", "optimize", "retrieve", "run", "solve",
]
