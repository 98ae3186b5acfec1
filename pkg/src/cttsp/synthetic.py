"""Synthetic interaction logs for tests, acceptance checks and benchmarks."""
from __future__ import annotations

import numpy as np

from .data import Dataset, RawEvent, preprocess


def _build(records: list[tuple[str, float, list[str]]]) -> Dataset:
    raw = [RawEvent(u, float(t), tuple(els)) for u, t, els in records]
    return preprocess(raw, coverage=1.0, min_len=1, max_len=10**9)


def periodic_dataset(num_users: int = 20, num_elements: int = 30, sets_per_user: int = 10,
                     set_size: int = 3, period: int = 3) -> Dataset:
    """Every user cycles through ``period`` fixed sets; fully determined by frequency and recency."""
    records = []
    for u in range(num_users):
        cycle = [[f"e{(set_size * (period * u + p) + i) % num_elements:03d}" for i in range(set_size)]
                 for p in range(period)]
        for k in range(sets_per_user):
            records.append((f"u{u:03d}", float(k), cycle[k % period]))
    return _build(records)


def collaborative_dataset(num_groups: int = 4, users_per_group: int = 15, chain_length: int = 10,
                          set_size: int = 2, sets_per_user: int = 6, seed: int = 0) -> Dataset:
    """Users of a group walk the same chain of sets, each starting at a random stage.

    A user's next set is always one they have never interacted with, but
    other users of the group have, so only shared structure predicts it.
    """
    rng = np.random.default_rng(seed)
    records = []
    for g in range(num_groups):
        chain = [[f"g{g}s{s:02d}i{i}" for i in range(set_size)] for s in range(chain_length)]
        for i in range(users_per_group):
            start = int(rng.integers(0, chain_length - sets_per_user + 1))
            t0 = float(rng.integers(0, 3 * chain_length))
            for k in range(sets_per_user):
                records.append((f"g{g}u{i:02d}", t0 + k, chain[start + k]))
    return _build(records)


def taobao_like_dataset(num_users: int = 1500, num_elements: int = 600, min_sets: int = 4, max_sets: int = 8,
                        horizon: float = 1e6, seed: int = 0) -> Dataset:
    """Many users, small sets and long-tailed popularity: few set-batch conflicts."""
    rng = np.random.default_rng(seed)
    popularity = 1.0 / np.arange(1, num_elements + 1) ** 0.6
    popularity /= popularity.sum()
    records = []
    for u in range(num_users):
        n_sets = int(rng.integers(min_sets, max_sets + 1))
        times = np.sort(rng.uniform(0.0, horizon, size=n_sets))
        for t in times:
            size = 1 + int(rng.random() < 0.15)
            els = rng.choice(num_elements, size=size, replace=False, p=popularity)
            records.append((f"u{u:05d}", float(np.round(t, 3)), [f"v{j:04d}" for j in els]))
    return _build(records)


def random_dataset(num_users: int = 10, num_elements: int = 15, num_events: int = 60, max_set: int = 4,
                   seed: int = 0) -> Dataset:
    """Uniformly random events; every user gets at least three sets."""
    rng = np.random.default_rng(seed)
    users = list(range(num_users)) * 3 + rng.integers(0, num_users, max(0, num_events - 3 * num_users)).tolist()
    records = []
    for k, u in enumerate(rng.permutation(users)):
        size = int(rng.integers(1, max_set + 1))
        els = rng.choice(num_elements, size=min(size, num_elements), replace=False)
        records.append((f"u{int(u):03d}", float(k // 2), [f"v{int(j):03d}" for j in els]))
    return _build(records)
