"""Flat counter registry shared by every simulator component.

Counters are dot-separated string keys; reports are emitted with sorted
keys so two runs of the same inputs produce byte-identical output.
"""

from __future__ import annotations

import json
from collections import defaultdict


class Stats:
    def __init__(self) -> None:
        self.counters: dict[str, int] = defaultdict(int)
        self.values: dict[str, float] = {}

    def bump(self, key: str, n: int = 1) -> None:
        self.counters[key] += n

    def put(self, key: str, value: float) -> None:
        self.values[key] = value

    def get(self, key: str) -> int:
        return self.counters.get(key, 0)

    def reset(self) -> None:
        """Drop accumulated counts (used at the warmup boundary)."""
        self.counters.clear()
        self.values.clear()

    def ratio(self, hits: str, misses: str) -> float:
        h, m = self.get(hits), self.get(misses)
        return h / (h + m) if h + m else 0.0

    def to_dict(self) -> dict:
        out: dict = dict(sorted(self.counters.items()))
        out.update(sorted(self.values.items()))
        return out

    def dumps(self, header: dict | None = None) -> str:
        doc = dict(header or {})
        doc.update(self.to_dict())
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"
