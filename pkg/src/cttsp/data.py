"""Interaction logs: ingestion, preprocessing and train/validation/test splits."""
from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .numerics.io import atomic_write_text


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class RawEvent:
    user_key: str
    timestamp: float
    elements: tuple[str, ...]


@dataclass(frozen=True)
class InteractionEvent:
    user: int
    elements: tuple[int, ...]
    timestamp: float


@dataclass
class Dataset:
    user_keys: list[str]
    element_keys: list[str]
    events: list[InteractionEvent]
    # per_user[u] = indices into ``events`` in temporal order
    per_user: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        if not self.per_user:
            self.per_user = [[] for _ in self.user_keys]
            for k, ev in enumerate(self.events):
                self.per_user[ev.user].append(k)

    @property
    def num_users(self) -> int:
        return len(self.user_keys)

    @property
    def num_elements(self) -> int:
        return len(self.element_keys)

    def statistics(self) -> dict[str, float]:
        """Counts in the layout of a dataset-statistics table (#S, #U, #E, #E/S, #S/U)."""
        n_sets = len(self.events)
        total = sum(len(e.elements) for e in self.events)
        return {
            "#S": n_sets,
            "#U": self.num_users,
            "#E": self.num_elements,
            "#E/S": round(total / n_sets, 2) if n_sets else 0.0,
            "#S/U": round(n_sets / self.num_users, 2) if self.num_users else 0.0,
        }


# --------------------------------------------------------------------------- ingest

def _make_raw(user, timestamp, elements, line: int) -> RawEvent:
    if user is None or str(user) == "":
        raise DataError(f"line {line}: missing user")
    try:
        ts = float(timestamp)
    except (TypeError, ValueError):
        raise DataError(f"line {line}: bad timestamp {timestamp!r}") from None
    if not math.isfinite(ts) or ts < 0:
        raise DataError(f"line {line}: timestamp must be finite and non-negative, got {timestamp!r}")
    seen: dict[str, None] = {}
    for el in elements:
        el = str(el).strip()
        if el:
            seen.setdefault(el, None)
    if not seen:
        raise DataError(f"line {line}: empty element set")
    return RawEvent(str(user), ts, tuple(seen))


def _read_csv(path: Path) -> list[RawEvent]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        cols = [c.strip() for c in header]
        try:
            iu, it, ie = cols.index("user"), cols.index("timestamp"), cols.index("elements")
        except ValueError:
            raise DataError(f"{path}: header must contain user,timestamp,elements") from None
        width = max(iu, it, ie) + 1
        for line, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) < width:
                raise DataError(f"line {line}: expected columns user,timestamp,elements")
            out.append(_make_raw(row[iu].strip(), row[it].strip(), row[ie].split("|"), line))
    return out


def _read_jsonl(path: Path) -> list[RawEvent]:
    out = []
    with open(path) as fh:
        for line, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                rec = json.loads(text)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {line}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or not {"user", "timestamp", "elements"} <= rec.keys():
                raise DataError(f"line {line}: expected keys user, timestamp, elements")
            if not isinstance(rec["elements"], list):
                raise DataError(f"line {line}: elements must be an array")
            out.append(_make_raw(rec["user"], rec["timestamp"], rec["elements"], line))
    return out


def ingest(path, fmt: Optional[str] = None) -> list[RawEvent]:
    """Read raw events from a CSV or JSONL log, in file order.

    Line numbers in errors count records, so the first record after the
    CSV header is line 1.
    """
    path = Path(path)
    if fmt is None:
        fmt = "jsonl" if path.suffix.lower() in (".jsonl", ".json", ".ndjson") else "csv"
    if fmt not in ("csv", "jsonl"):
        raise DataError(f"unknown format {fmt!r}")
    if not path.exists():
        raise DataError(f"{path}: no such file")
    events = _read_csv(path) if fmt == "csv" else _read_jsonl(path)
    if not events:
        raise DataError(f"{path}: empty file")
    return events


# --------------------------------------------------------------------------- preprocess

def frequent_elements(raw: Sequence[RawEvent], coverage: float) -> set[str]:
    """Smallest frequency-ordered prefix of elements covering ``coverage`` of all occurrences."""
    counts = Counter(el for ev in raw for el in ev.elements)
    total = sum(counts.values())
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = set()
    cum = 0
    for key, c in ordered:
        kept.add(key)
        cum += c
        if cum >= coverage * total - 1e-9 * total:
            break
    return kept


def preprocess(raw: Sequence[RawEvent], coverage: float = 0.8, min_len: int = 4, max_len: int = 20) -> Dataset:
    if not raw:
        raise DataError("no events to preprocess")
    if not 0 < coverage <= 1:
        raise DataError(f"coverage must be in (0, 1], got {coverage}")
    if not 1 <= min_len <= max_len:
        raise DataError(f"need 1 <= min_len <= max_len, got {min_len}, {max_len}")

    kept = frequent_elements(raw, coverage)
    order = sorted(range(len(raw)), key=lambda i: raw[i].timestamp)  # stable: ties keep file order
    per_user: dict[str, list[tuple[int, tuple[str, ...]]]] = {}
    for i in order:
        ev = raw[i]
        els = tuple(dict.fromkeys(e for e in ev.elements if e in kept))
        if els:
            per_user.setdefault(ev.user_key, []).append((i, els))

    surviving = []
    for seq in per_user.values():
        if len(seq) < min_len:
            continue
        surviving.extend(seq[-max_len:])
    if not surviving:
        raise DataError("empty dataset: every user was dropped by preprocessing")

    surviving.sort(key=lambda item: (raw[item[0]].timestamp, item[0]))
    user_keys = sorted({raw[i].user_key for i, _ in surviving})
    element_keys = sorted({e for _, els in surviving for e in els})
    uid = {k: n for n, k in enumerate(user_keys)}
    eid = {k: n for n, k in enumerate(element_keys)}
    events = [
        InteractionEvent(uid[raw[i].user_key], tuple(sorted(eid[e] for e in els)), raw[i].timestamp)
        for i, els in surviving
    ]
    return Dataset(user_keys, element_keys, events)


def dataset_to_raw(ds: Dataset) -> list[RawEvent]:
    return [
        RawEvent(ds.user_keys[e.user], e.timestamp, tuple(ds.element_keys[j] for j in e.elements))
        for e in ds.events
    ]


# --------------------------------------------------------------------------- split

@dataclass
class SplitPlan:
    """Which events train the model and which sets are prediction targets.

    A target is a pair ``(query_event, target_event)``: the model's scores
    after processing ``query_event`` are compared with the set of
    ``target_event`` (the same user's next set).
    """

    mode: str
    train_users: list[int]
    val_users: list[int]
    test_users: list[int]
    train_events: list[int]
    train_pairs: list[tuple[int, int]]
    val_context: list[int]
    val_pairs: list[tuple[int, int]]
    test_context: list[int]
    test_pairs: list[tuple[int, int]]
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0

    def stage(self, name: str) -> tuple[list[int], list[tuple[int, int]]]:
        if name == "validation":
            return self.val_context, self.val_pairs
        if name == "test":
            return self.test_context, self.test_pairs
        if name == "train":
            return self.train_events, self.train_pairs
        raise ValueError(f"unknown stage {name!r}")

    def to_json(self) -> dict:
        return {
            "mode": self.mode, "ratios": list(self.ratios), "seed": self.seed,
            "train_users": self.train_users, "val_users": self.val_users, "test_users": self.test_users,
        }


def split(ds: Dataset, mode: str = "transductive", ratios: Sequence[float] = (0.7, 0.1, 0.2),
          seed: int = 0) -> SplitPlan:
    """Build the transductive or inductive split.

    Transductive: per user the last set is the test target, the second last
    the validation target and the rest are training sets; only training
    sets followed by another training set carry a training loss.
    Inductive: users are shuffled with ``seed`` and partitioned by
    ``ratios`` (floor for validation/test, remainder to training); a held-out
    user's last set is the target and earlier sets are context.
    """
    ratios = tuple(float(r) for r in ratios)
    seqs = ds.per_user
    if mode == "transductive":
        for u, seq in enumerate(seqs):
            if len(seq) < 3:
                raise DataError(f"user {ds.user_keys[u]!r} has {len(seq)} sets; transductive split needs at least 3")
        users = list(range(ds.num_users))
        train_events = sorted(k for seq in seqs for k in seq[:-2])
        train_pairs = [(seq[j], seq[j + 1]) for seq in seqs for j in range(len(seq) - 3)]
        val_context = train_events
        val_pairs = [(seq[-3], seq[-2]) for seq in seqs]
        test_context = sorted(k for seq in seqs for k in seq[:-1])
        test_pairs = [(seq[-2], seq[-1]) for seq in seqs]
        return SplitPlan(mode, users, users, users, train_events, sorted(train_pairs), val_context,
                         sorted(val_pairs), test_context, sorted(test_pairs), ratios, seed)
    if mode == "inductive":
        if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
            raise DataError(f"inductive ratios must be three non-negative numbers summing to 1, got {ratios}")
        perm = np.random.default_rng(seed).permutation(ds.num_users).tolist()
        n = len(perm)
        n_val = int(math.floor(n * ratios[1] + 1e-9))
        n_test = int(math.floor(n * ratios[2] + 1e-9))
        n_train = n - n_val - n_test
        train_users = sorted(perm[:n_train])
        val_users = sorted(perm[n_train:n_train + n_val])
        test_users = sorted(perm[n_train + n_val:])
        for u in val_users + test_users:
            if len(seqs[u]) < 2:
                raise DataError(f"held-out user {ds.user_keys[u]!r} needs at least 2 sets")
        train_events = sorted(k for u in train_users for k in seqs[u])
        train_pairs = sorted((seqs[u][j], seqs[u][j + 1]) for u in train_users for j in range(len(seqs[u]) - 1))

        def held_out(group):
            context = sorted(train_events + [k for u in group for k in seqs[u][:-1]])
            pairs = sorted((seqs[u][-2], seqs[u][-1]) for u in group)
            return context, pairs

        val_context, val_pairs = held_out(val_users)
        test_context, test_pairs = held_out(test_users)
        return SplitPlan(mode, train_users, val_users, test_users, train_events, train_pairs,
                         val_context, val_pairs, test_context, test_pairs, ratios, seed)
    raise DataError(f"unknown split mode {mode!r}")


# --------------------------------------------------------------------------- persistence

def write_events(path, events: Iterable[RawEvent]) -> None:
    path = Path(path)
    if path.suffix.lower() == ".jsonl":
        text = "".join(json.dumps({"user": e.user_key, "timestamp": e.timestamp, "elements": list(e.elements)}) + "\n"
                       for e in events)
    else:
        rows = ["user,timestamp,elements"]
        rows += [f"{e.user_key},{_fmt_ts(e.timestamp)},{'|'.join(e.elements)}" for e in events]
        text = "\n".join(rows) + "\n"
    atomic_write_text(path, text)


def _fmt_ts(ts: float) -> str:
    return str(int(ts)) if float(ts).is_integer() else repr(ts)


def save_dataset(ds: Dataset, out_dir, split_plan: Optional[SplitPlan] = None, extra: Optional[dict] = None) -> Path:
    """Write ``manifest.json`` plus ``events.csv`` (re-indexed ids, ingestion format)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_events(out / "events.csv", (
        RawEvent(str(e.user), e.timestamp, tuple(str(j) for j in e.elements)) for e in ds.events))
    manifest = {
        "users": ds.user_keys,
        "elements": ds.element_keys,
        "events_file": "events.csv",
        "statistics": ds.statistics(),
    }
    if split_plan is not None:
        manifest["split"] = split_plan.to_json()
    if extra:
        manifest.update(extra)
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=1))
    return out / "manifest.json"


def load_dataset(path) -> Dataset:
    """Load a dataset directory (or its manifest path) written by :func:`save_dataset`."""
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.exists():
        raise DataError(f"{manifest_path}: no dataset manifest")
    manifest = json.loads(manifest_path.read_text())
    raw = ingest(manifest_path.parent / manifest["events_file"], "csv")
    events = [InteractionEvent(int(r.user_key), tuple(sorted(int(j) for j in r.elements)), r.timestamp) for r in raw]
    return Dataset(list(manifest["users"]), list(manifest["elements"]), events)


def load_split(path, ds: Dataset) -> Optional[SplitPlan]:
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    manifest = json.loads(manifest_path.read_text())
    s = manifest.get("split")
    if s is None:
        return None
    return split(ds, s["mode"], s.get("ratios", (0.7, 0.1, 0.2)), s.get("seed", 0))
