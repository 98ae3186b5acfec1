"""Evolving, non-trainable states of users and elements plus per-user histories."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class MemoryOrderError(RuntimeError):
    """A write would move an entity's clock backwards."""


class MemoryBank:
    """User/element memories and their last-update times.

    Reads return copies, so nothing downstream can hold a live reference
    into the bank; writes store copies of plain arrays.
    """

    def __init__(self, num_users: int, num_elements: int, dim: int):
        self.num_users = num_users
        self.num_elements = num_elements
        self.dim = dim
        self.reset()

    def reset(self) -> "MemoryBank":
        self.user_memory = np.zeros((self.num_users, self.dim))
        self.element_memory = np.zeros((self.num_elements, self.dim))
        self.user_last_time = np.zeros(self.num_users)
        self.element_last_time = np.zeros(self.num_elements)
        return self

    def restart_clock(self) -> "MemoryBank":
        """Keep the vectors but forget last-interaction times, so a new pass may start at any time."""
        self.user_last_time[:] = 0.0
        self.element_last_time[:] = 0.0
        return self

    def _table(self, kind: str):
        if kind == "user":
            return self.user_memory, self.user_last_time
        if kind == "element":
            return self.element_memory, self.element_last_time
        raise ValueError(f"unknown entity kind {kind!r}")

    def read(self, kind: str, ids) -> tuple[np.ndarray, np.ndarray]:
        mem, last = self._table(kind)
        idx = np.asarray(ids, dtype=np.intp)
        if idx.size and (idx.min() < 0 or idx.max() >= len(mem)):
            raise IndexError(f"{kind} id out of range [0, {len(mem)})")
        return mem[idx].copy(), last[idx].copy()

    def write(self, kind: str, ids, values: np.ndarray, timestamps) -> None:
        mem, last = self._table(kind)
        idx = np.asarray(ids, dtype=np.intp).reshape(-1)
        ts = np.broadcast_to(np.asarray(timestamps, dtype=np.float64), idx.shape)
        vals = np.asarray(values, dtype=np.float64).reshape(idx.size, self.dim)
        if idx.size and (idx.min() < 0 or idx.max() >= len(mem)):
            raise IndexError(f"{kind} id out of range [0, {len(mem)})")
        if len(np.unique(idx)) != idx.size:
            raise MemoryOrderError(f"duplicate {kind} ids in one write")
        behind = ts < last[idx]
        if np.any(behind):
            i = int(np.argmax(behind))
            raise MemoryOrderError(
                f"{kind} {int(idx[i])}: write at t={ts[i]} precedes last update t={last[idx[i]]}")
        mem[idx] = vals
        last[idx] = ts

    def snapshot(self) -> dict[str, np.ndarray]:
        return {
            "user_memory": self.user_memory.copy(),
            "element_memory": self.element_memory.copy(),
            "user_last_time": self.user_last_time.copy(),
            "element_last_time": self.element_last_time.copy(),
        }

    def restore(self, snap: dict[str, np.ndarray]) -> "MemoryBank":
        self.user_memory = snap["user_memory"].copy()
        self.element_memory = snap["element_memory"].copy()
        self.user_last_time = snap["user_last_time"].copy()
        self.element_last_time = snap["element_last_time"].copy()
        self.num_users, self.dim = self.user_memory.shape
        self.num_elements = self.element_memory.shape[0]
        return self


@dataclass
class _UserHistory:
    elements: list[int]
    times: list[float]
    distinct: dict[int, None]


class HistoryIndex:
    """Each user's interacted elements as a multiset, in interaction order."""

    def __init__(self, num_users: int):
        self.num_users = num_users
        self.reset()

    def reset(self) -> "HistoryIndex":
        self._users = [_UserHistory([], [], {}) for _ in range(self.num_users)]
        return self

    def append(self, user: int, elements: Sequence[int], timestamp: float) -> None:
        h = self._users[user]
        if h.times and timestamp < h.times[-1]:
            raise MemoryOrderError(f"user {user}: history append at t={timestamp} precedes t={h.times[-1]}")
        for j in elements:
            h.elements.append(int(j))
            h.times.append(float(timestamp))
            h.distinct.setdefault(int(j), None)

    def elements(self, user: int) -> list[int]:
        return list(self._users[user].elements)

    def unique(self, user: int) -> list[int]:
        """Distinct elements, in order of first interaction."""
        return list(self._users[user].distinct)

    def length(self, user: int) -> int:
        return len(self._users[user].elements)

    def indicator(self, user: int, num_elements: int) -> np.ndarray:
        tau = np.zeros(num_elements)
        tau[list(self._users[user].distinct)] = 1.0
        return tau

    def snapshot(self) -> list[_UserHistory]:
        return copy.deepcopy(self._users)

    def restore(self, snap) -> "HistoryIndex":
        self._users = copy.deepcopy(snap)
        self.num_users = len(self._users)
        return self

    def to_arrays(self) -> dict[str, np.ndarray]:
        """Flat (user, element, time) triples for the binary checkpoint format."""
        rows = [(u, j, t) for u, h in enumerate(self._users) for j, t in zip(h.elements, h.times)]
        arr = np.array(rows, dtype=np.float64).reshape(-1, 3)
        return {"history": arr}

    @classmethod
    def from_arrays(cls, num_users: int, arrays: dict[str, np.ndarray]) -> "HistoryIndex":
        index = cls(num_users)
        rows = arrays.get("history", np.zeros((0, 3)))
        for u, j, t in rows:
            h = index._users[int(u)]
            h.elements.append(int(j))
            h.times.append(float(t))
            h.distinct.setdefault(int(j), None)
        return index
