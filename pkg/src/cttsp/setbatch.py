"""Time-consistent mini-batches over the universal sequence.

Each event goes to the earliest batch after every batch that already holds
its user or one of its elements, so a batch never touches the same memory
slot twice and conflicting events keep their temporal order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .data import InteractionEvent
from .numerics.io import atomic_write_text


class PlanError(ValueError):
    pass


@dataclass
class BatchPlan:
    batches: list[list[int]]
    max_set_sizes: list[int] = field(default_factory=list)

    @property
    def batch_num(self) -> int:
        return len(self.batches)

    @property
    def num_events(self) -> int:
        return sum(len(b) for b in self.batches)

    def summary(self) -> dict:
        return {
            "batch_num": self.batch_num,
            "events": self.num_events,
            "mean_batch_size": self.num_events / self.batch_num if self.batches else 0.0,
            "max_batch_size": max((len(b) for b in self.batches), default=0),
        }

    def to_json(self) -> dict:
        return {"batches": self.batches}

    def save(self, path) -> None:
        doc = self.to_json()
        doc["summary"] = self.summary()
        atomic_write_text(Path(path), json.dumps(doc))

    @classmethod
    def load(cls, path, events: Sequence[InteractionEvent]) -> "BatchPlan":
        doc = json.loads(Path(path).read_text())
        batches = [list(map(int, b)) for b in doc["batches"]]
        return cls(batches, [max(len(events[k].elements) for k in b) for b in batches])


def build_batch_plan(events: Sequence[InteractionEvent], index: Optional[Sequence[int]] = None) -> BatchPlan:
    """Greedy set-batch planning in one pass over the (sorted) events.

    ``index`` selects a time-ordered subsequence of ``events``; the plan then
    refers to those indices. Runs in time linear in the total set size.
    """
    ids = range(len(events)) if index is None else index
    user_last: dict[int, int] = {}
    element_last: dict[int, int] = {}
    batches: list[list[int]] = []
    sizes: list[int] = []
    prev_t = float("-inf")
    for k in ids:
        ev = events[k]
        if ev.timestamp < prev_t:
            raise PlanError(f"events not sorted by timestamp at index {k}")
        prev_t = ev.timestamp
        slot = user_last.get(ev.user, -1)
        for j in ev.elements:
            slot = max(slot, element_last.get(j, -1))
        slot += 1
        if slot == len(batches):
            batches.append([])
            sizes.append(0)
        batches[slot].append(k)
        sizes[slot] = max(sizes[slot], len(ev.elements))
        user_last[ev.user] = slot
        for j in ev.elements:
            element_last[j] = slot
    return BatchPlan(batches, sizes)


def sequential_plan(events: Sequence[InteractionEvent], index: Optional[Sequence[int]] = None) -> BatchPlan:
    """One event per batch in sequence order (the plan without set-batch)."""
    ids = list(range(len(events)) if index is None else index)
    return BatchPlan([[k] for k in ids], [len(events[k].elements) for k in ids])


@dataclass(frozen=True)
class Violation:
    kind: str  # "missing", "duplicate_event", "duplicate_user", "duplicate_element", "order"
    batch: int
    events: tuple[int, ...]
    entity: Optional[str] = None

    def __str__(self) -> str:
        what = f" on {self.entity}" if self.entity else ""
        return f"{self.kind}{what} in batch {self.batch}: events {list(self.events)}"


def validate_plan(plan: BatchPlan, events: Sequence[InteractionEvent],
                  index: Optional[Sequence[int]] = None) -> list[Violation]:
    """Every violated set-batch guarantee; an empty list means the plan is valid."""
    expected = set(range(len(events)) if index is None else index)
    out: list[Violation] = []
    where: dict[int, int] = {}
    for b, batch in enumerate(plan.batches):
        users: dict[int, int] = {}
        elems: dict[int, int] = {}
        for k in batch:
            if k in where:
                out.append(Violation("duplicate_event", b, (where[k], k)))
                continue
            where[k] = b
            ev = events[k]
            if ev.user in users:
                out.append(Violation("duplicate_user", b, (users[ev.user], k), f"u{ev.user}"))
            users[ev.user] = k
            for j in ev.elements:
                if j in elems:
                    out.append(Violation("duplicate_element", b, (elems[j], k), f"v{j}"))
                elems[j] = k
    for k in sorted(expected - where.keys()):
        out.append(Violation("missing", -1, (k,)))

    # Per entity, an event may not sit in an earlier batch than any strictly earlier event.
    touching: dict[str, list[int]] = {}
    for k in sorted(where):
        ev = events[k]
        touching.setdefault(f"u{ev.user}", []).append(k)
        for j in ev.elements:
            touching.setdefault(f"v{j}", []).append(k)
    for entity, ks in touching.items():
        ks.sort(key=lambda k: (events[k].timestamp, k))
        best_prev = None  # event with the highest batch among strictly earlier timestamps
        group_best = None
        group_t = None
        for k in ks:
            t = events[k].timestamp
            if t != group_t:
                if group_best is not None and (best_prev is None or where[group_best] > where[best_prev]):
                    best_prev = group_best
                group_t, group_best = t, None
            # equal batches are already reported as duplicates
            if best_prev is not None and where[best_prev] > where[k]:
                out.append(Violation("order", where[k], (best_prev, k), entity))
            if group_best is None or where[k] > where[group_best]:
                group_best = k
    return out
