"""Primitive-invocation counting, the cost model check and timing reports."""

from __future__ import annotations

import csv
import json
import time
from collections.abc import Iterable
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

PRIMITIVES = ("DPUF", "H", "AEAD.Enc", "DPAN", "KDF")

# Per-role cost of one completed session: 2 DPUF + 2 H + 2 AEAD.Enc + 1 DPAN + 1 KDF.
SESSION_COST = {"DPUF": 2, "H": 2, "AEAD.Enc": 2, "DPAN": 1, "KDF": 1}


@dataclass
class OpCounter:
    counts: dict[str, int] = field(default_factory=lambda: dict.fromkeys(PRIMITIVES, 0))
    seconds: dict[str, float] = field(default_factory=lambda: dict.fromkeys(PRIMITIVES, 0.0))

    @contextmanager
    def track(self, name: str):
        if name not in self.counts:
            raise KeyError(f"unknown primitive {name!r}")
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[name] += time.perf_counter() - t0
            self.counts[name] += 1

    def snapshot(self) -> dict[str, int]:
        return dict(self.counts)

    def matches_session_cost(self) -> bool:
        return self.counts == SESSION_COST


@dataclass
class TimingRow:
    primitive: str
    count: int
    total_s: float

    @property
    def mean_s(self) -> float:
        return self.total_s / self.count if self.count else 0.0


def timing_report(counters: Iterable[OpCounter]) -> list[TimingRow]:
    """Aggregate measured wall time per primitive over many sessions.

    These are this machine's numbers for the simulator, not a reproduction of
    any embedded-hardware figure.
    """
    rows = {p: TimingRow(p, 0, 0.0) for p in PRIMITIVES}
    for c in counters:
        for p in PRIMITIVES:
            rows[p].count += c.counts[p]
            rows[p].total_s += c.seconds[p]
    return [rows[p] for p in PRIMITIVES]


def write_timing_csv(rows: list[TimingRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["primitive", "count", "mean_s", "total_s"])
        for r in rows:
            w.writerow([r.primitive, r.count, f"{r.mean_s:.9f}", f"{r.total_s:.9f}"])


def write_rows_csv(rows: list[dict], path: str | Path) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")
