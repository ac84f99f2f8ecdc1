"""Lightweight counters for recoverable anomalies (degenerate faces, etc.)."""

from __future__ import annotations

from collections import Counter

_counters: Counter = Counter()


def count(name: str, n: int = 1) -> None:
    _counters[name] += n


def get(name: str) -> int:
    return _counters[name]


def reset() -> None:
    _counters.clear()
