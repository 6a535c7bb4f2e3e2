"""Proportional prioritized replay on an array-backed sum-tree."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit


@dataclass
class Transition:
    """One (s, a, r, s') step.

    States are kept as (user, history) so they can be rebuilt with the current
    state-module weights at replay time.
    """

    user: int
    history: tuple[int, ...]
    action: np.ndarray
    reward: float
    next_history: tuple[int, ...]
    terminal: bool = False
    item: int = -1

    def __post_init__(self):
        if not -1.0 <= self.reward <= 1.0:
            raise ValueError(f"reward {self.reward} outside [-1, 1]")


@njit(cache=True)
def _tree_set(nodes, mx, cap2, idx, values):  # pragma: no cover - jitted
    for t in range(idx.size):
        j = cap2 + idx[t]
        nodes[j] = values[t]
        mx[j] = values[t]
        j >>= 1
        # recompute rather than add deltas so sums never drift
        while j >= 1:
            nodes[j] = nodes[2 * j] + nodes[2 * j + 1]
            mx[j] = max(mx[2 * j], mx[2 * j + 1])
            j >>= 1


@njit(cache=True)
def _tree_find(nodes, cap2, masses, out):  # pragma: no cover - jitted
    for t in range(masses.size):
        mass = masses[t]
        j = 1
        while j < cap2:
            left = nodes[2 * j]
            if mass < left or nodes[2 * j + 1] <= 0.0:
                j = 2 * j
            else:
                mass -= left
                j = 2 * j + 1
        out[t] = j - cap2


class SumTree:
    """Complete binary tree in one array: node j has children 2j and 2j+1, leaves at [cap, 2cap)."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._cap2 = 1 << (capacity - 1).bit_length()
        self.nodes = np.zeros(2 * self._cap2)
        self._max = np.zeros(2 * self._cap2)

    @property
    def total(self) -> float:
        return float(self.nodes[1])

    @property
    def max_leaf(self) -> float:
        return float(self._max[1])

    def leaf(self, idx: int) -> float:
        return float(self.nodes[self._cap2 + idx])

    @property
    def leaves(self) -> np.ndarray:
        return self.nodes[self._cap2:self._cap2 + self.capacity]

    def set(self, idx: int, value: float) -> None:
        self.set_many(np.array([idx], dtype=np.int64), np.array([value], dtype=np.float64))

    def set_many(self, idx: np.ndarray, values: np.ndarray) -> None:
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= self.capacity):
            raise IndexError("leaf index out of range")
        _tree_set(self.nodes, self._max, self._cap2, idx, np.asarray(values, dtype=np.float64))

    def find(self, mass: float) -> int:
        """Leaf whose cumulative range contains ``mass`` (0 <= mass < total)."""
        return int(self.find_many(np.array([mass], dtype=np.float64))[0])

    def find_many(self, masses: np.ndarray) -> np.ndarray:
        out = np.empty(len(masses), dtype=np.int64)
        _tree_find(self.nodes, self._cap2, np.asarray(masses, dtype=np.float64), out)
        return out


@dataclass
class ReplayStats:
    pushes: int = 0
    stale_updates: int = 0


class PrioritizedReplay:
    def __init__(self, capacity: int = 100_000, alpha: float = 0.6, priority_floor: float = 1e-5):
        self.tree = SumTree(capacity)
        self.capacity = capacity
        self.alpha = alpha
        self.floor = priority_floor
        self.data: list[Transition | None] = [None] * capacity
        self._gen = np.zeros(capacity, dtype=np.int64)
        self.cursor = 0
        self.size = 0
        self.stats = ReplayStats()

    def __len__(self) -> int:
        return self.size

    def push(self, t: Transition, priority: float | None = None) -> int:
        """Store at the cursor, overwriting the oldest slot when full.

        Without an explicit priority the transition gets the current maximum
        leaf (1.0 for an empty buffer), so it is replayed soon.
        """
        idx = self.cursor
        if priority is None:
            leaf = self.tree.max_leaf if self.size else 1.0
        else:
            leaf = max(priority, self.floor) ** self.alpha
        self.data[idx] = t
        self._gen[idx] = self.stats.pushes
        self.tree.set(idx, leaf)
        self.cursor = (idx + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.stats.pushes += 1
        return idx

    def probabilities(self) -> np.ndarray:
        return self.tree.leaves[: self.size] / self.tree.total

    def sample(self, n: int, beta: float, rng: np.random.Generator):
        """Stratified proportional draw of ``n`` transitions.

        Returns (transitions, indices, is_weights, tokens); ``tokens`` identify
        the slot generation so priority updates to overwritten slots are dropped.
        """
        if self.size < n:
            raise ValueError(f"buffer holds {self.size} < {n} transitions")
        total = self.tree.total
        seg = total / n
        points = (np.arange(n) + rng.random(n)) * seg
        points = np.minimum(points, np.nextafter(total, 0.0))
        # the tree may hold zero leaves beyond `size`; clamp onto live data
        idx = np.minimum(self.tree.find_many(points), self.size - 1)
        probs = self.tree.leaves[idx] / total
        w = (self.size * probs) ** (-beta)
        w = w / w.max()
        return [self.data[i] for i in idx], idx, w, self._gen[idx].copy()

    def update_priorities(self, indices: Sequence[int], td_errors: Sequence[float], tokens=None) -> None:
        idx = np.asarray(indices, dtype=np.int64)
        pr = (np.abs(np.asarray(td_errors, dtype=np.float64)) + self.floor) ** self.alpha
        if tokens is not None:
            live = self._gen[idx] == np.asarray(tokens)
            self.stats.stale_updates += int((~live).sum())
            idx, pr = idx[live], pr[live]
        self.tree.set_many(idx, pr)
