"""Top-K ranking metrics, frequency baselines and the evaluation protocols."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import Dataset, InteractionEvent, SplitPlan
from .numerics.io import atomic_write_text

DEFAULT_KS = (10, 20, 30, 40)
METRICS = ("recall", "ndcg", "phr")


def rank(scores: np.ndarray) -> np.ndarray:
    """Element ids by descending score, ties by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), -scores))


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    return rank(scores)[:k]


def _hits(ranking: Sequence[int], truth: set, k: int) -> list[bool]:
    return [int(j) in truth for j in ranking[:k]]


def _check_truth(truth) -> set:
    truth = {int(j) for j in truth}
    if not truth:
        raise ValueError("empty truth set")
    return truth


def recall_at_k(scores, truth, k: int) -> float:
    truth = _check_truth(truth)
    return sum(_hits(top_k(scores, k), truth, k)) / len(truth)


def ndcg_at_k(scores, truth, k: int) -> float:
    truth = _check_truth(truth)
    return _ndcg(_hits(top_k(scores, k), truth, k), len(truth), k)


def phr_at_k(scores, truth, k: int) -> float:
    truth = _check_truth(truth)
    return float(any(_hits(top_k(scores, k), truth, k)))


def _ndcg(hits: list[bool], n_truth: int, k: int) -> float:
    dcg = sum(1.0 / math.log2(r + 2) for r, h in enumerate(hits) if h)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, n_truth)))
    return dcg / idcg


def ranking_metrics(ranking: Sequence[int], truth, ks: Sequence[int] = DEFAULT_KS) -> dict[str, dict[int, float]]:
    """All three metrics at every K from one precomputed ranking."""
    truth = _check_truth(truth)
    hits = _hits(ranking, truth, max(ks))
    out: dict[str, dict[int, float]] = {m: {} for m in METRICS}
    for k in ks:
        h = hits[:k]
        out["recall"][k] = sum(h) / len(truth)
        out["ndcg"][k] = _ndcg(h, len(truth), k)
        out["phr"][k] = float(any(h))
    return out


# --------------------------------------------------------------------------- reports

@dataclass
class MetricReport:
    ks: tuple[int, ...] = DEFAULT_KS
    users: list[int] = field(default_factory=list)
    # values[metric][k] holds one value per entry of ``users``
    values: dict[str, dict[int, list[float]]] = field(default_factory=dict)

    def __post_init__(self):
        self.ks = tuple(self.ks)
        for m in METRICS:
            self.values.setdefault(m, {k: [] for k in self.ks})

    def add(self, user: int, ranking: Sequence[int], truth) -> None:
        self.users.append(int(user))
        for m, per_k in ranking_metrics(ranking, truth, self.ks).items():
            for k, v in per_k.items():
                self.values[m][k].append(v)

    def mean(self, metric: str, k: int) -> float:
        vals = self.values[metric][k]
        return float(np.mean(vals)) if vals else 0.0

    def means(self) -> dict[str, dict[int, float]]:
        return {m: {k: self.mean(m, k) for k in self.ks} for m in METRICS}

    def average_ndcg(self) -> float:
        return float(np.mean([self.mean("ndcg", k) for k in self.ks]))

    def flat(self) -> dict[str, float]:
        return {f"{m}@{k}": self.mean(m, k) for m in METRICS for k in self.ks}

    def to_json(self, per_user: bool = True) -> dict:
        doc = {"ks": list(self.ks), "num_users": len(self.users),
               "mean": {m: {str(k): v for k, v in per_k.items()} for m, per_k in self.means().items()}}
        if per_user:
            doc["users"] = self.users
            doc["per_user"] = {m: {str(k): v for k, v in per_k.items()} for m, per_k in self.values.items()}
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "MetricReport":
        ks = tuple(int(k) for k in doc["ks"])
        values = {m: {int(k): list(v) for k, v in per_k.items()} for m, per_k in doc.get("per_user", {}).items()}
        return cls(ks, list(doc.get("users", [])), values)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric"] + [f"K={k}" for k in self.ks])
        for m in METRICS:
            w.writerow([m] + [f"{self.mean(m, k):.4f}" for k in self.ks])
        return buf.getvalue()

    def save(self, stem) -> None:
        stem = Path(stem)
        atomic_write_text(stem.with_suffix(".json"), json.dumps(self.to_json(), indent=1))
        atomic_write_text(stem.with_suffix(".csv"), self.to_csv())


def average_reports(reports: Sequence[MetricReport]) -> dict[str, dict[int, float]]:
    """Per-metric, per-K means across runs (e.g. seeds)."""
    ks = reports[0].ks
    return {m: {k: float(np.mean([r.mean(m, k) for r in reports])) for k in ks} for m in METRICS}


# --------------------------------------------------------------------------- baselines

def top_baseline(events: Iterable[InteractionEvent], num_elements: int) -> np.ndarray:
    """Global ranking by occurrence count, ties by ascending id."""
    counts = np.zeros(num_elements)
    for e in events:
        counts[list(e.elements)] += 1
    return rank(counts)


def ptop_baseline(events: Iterable[InteractionEvent], user: int, num_elements: int,
                  top: Optional[np.ndarray] = None) -> np.ndarray:
    """The user's own elements by count (ties ascending id), then the rest in ``top`` order."""
    events = list(events)
    if top is None:
        top = top_baseline(events, num_elements)
    counts = Counter(j for e in events if e.user == user for j in e.elements)
    own = sorted(counts, key=lambda j: (-counts[j], j))
    seen = set(own)
    return np.array(own + [int(j) for j in top if int(j) not in seen], dtype=np.intp)


def baseline_report(ds: Dataset, split_plan: SplitPlan, stage: str, kind: str,
                    ks: Sequence[int] = DEFAULT_KS) -> MetricReport:
    """TOP or PTOP scored on a stage's targets; counts come from the stage's context events."""
    context, pairs = split_plan.stage(stage)
    ctx = [ds.events[k] for k in context]
    top = top_baseline(ctx, ds.num_elements)
    per_user = {}
    if kind.upper() == "PTOP":
        by_user: dict[int, Counter] = {}
        for e in ctx:
            by_user.setdefault(e.user, Counter()).update(e.elements)
    report = MetricReport(tuple(ks))
    for query, target in pairs:
        u = ds.events[query].user
        if kind.upper() == "TOP":
            ranking = top
        elif kind.upper() == "PTOP":
            if u not in per_user:
                counts = by_user.get(u, Counter())
                own = sorted(counts, key=lambda j: (-counts[j], j))
                seen = set(own)
                per_user[u] = own + [int(j) for j in top if int(j) not in seen]
            ranking = per_user[u]
        else:
            raise ValueError(f"unknown baseline {kind!r}")
        report.add(u, ranking, ds.events[target].elements)
    return report


# --------------------------------------------------------------------------- model protocols

def score_queries(model, events: Sequence[InteractionEvent], context: Sequence[int],
                  queries: Iterable[int], plan=None) -> dict[int, np.ndarray]:
    """Frozen-parameter pass from zero memory over ``context``; scores at each query event."""
    from .model import ForwardPass
    from .setbatch import build_batch_plan

    plan = plan if plan is not None else build_batch_plan(events, index=context)
    bank, history = model.new_state()
    out = {}
    for res in ForwardPass(model, events, plan.batches, bank, history, score=queries):
        for r, k in enumerate(res.events):
            out[k] = res.probs.value[r]
    return out


def evaluate(model, ds: Dataset, split_plan: SplitPlan, stage: str = "test",
             protocol: Optional[str] = None, ks: Sequence[int] = DEFAULT_KS, plan=None) -> MetricReport:
    """Score a stage's targets.

    The pass replays the stage's context in time order from zero memory, so
    the bank at each query equals the bank of a sequential run over the
    same events. For inductive splits this is the held-out users' context
    replayed alongside the training users' events.
    """
    if protocol is not None and protocol != split_plan.mode:
        raise ValueError(f"protocol {protocol!r} does not match the {split_plan.mode!r} split")
    context, pairs = split_plan.stage(stage)
    scores = score_queries(model, ds.events, context, [q for q, _ in pairs], plan)
    report = MetricReport(tuple(ks))
    for query, target in pairs:
        report.add(ds.events[query].user, rank(scores[query]), ds.events[target].elements)
    return report
