"""Prioritized replay with recency emphasis.

Transitions are sampled with probability proportional to priority^alpha,
restricted to a recent range that shrinks as training inside an episode
phase progresses (range = |B| * eta^(1000 * fraction), floored at c_min and
the batch size). Importance weights correct the sampling bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import seeding


@dataclass
class Transition:
    """One MDP step; `action` is the simplex weight vector the environment
    consumed and `action_raw` the pre-softmax vector the critics see."""

    state: np.ndarray
    action: np.ndarray
    action_raw: np.ndarray
    reward: float
    next_state: np.ndarray


@dataclass
class SampledBatch:
    indices: np.ndarray
    states: np.ndarray
    actions_raw: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    weights: np.ndarray


@dataclass
class ReplayBuffer:
    capacity: int = 100_000
    alpha: float = 0.6       # priority exponent
    beta: float = 0.4        # importance-weight exponent
    eta: float = 0.996       # recency decay
    c_min: int = 5_000       # floor of the recent range
    seed: int = 0
    priority_eps: float = 1e-6

    _items: list = field(default_factory=list, repr=False)
    _priorities: np.ndarray = None
    _insert_ids: np.ndarray = None
    _next: int = 0
    _total: int = 0
    _max_priority: float = 1.0

    def __post_init__(self):
        self._priorities = np.zeros(self.capacity)
        self._insert_ids = np.full(self.capacity, -1, dtype=np.int64)
        self._rng = seeding.stream(self.seed, seeding.REPLAY)

    def __len__(self):
        return len(self._items)

    def push(self, tau: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(tau)
        else:
            self._items[self._next] = tau
        self._priorities[self._next] = self._max_priority
        self._insert_ids[self._next] = self._total
        self._next = (self._next + 1) % self.capacity
        self._total += 1

    def recent_range(self, batch: int, round_fraction: float) -> int:
        """Size of the eligible recent window for this sampling call."""
        size = len(self._items)
        shrunk = size * self.eta ** (1000.0 * round_fraction)
        return int(min(size, max(shrunk, self.c_min, batch)))

    def sample(self, batch: int, round_fraction: float = 0.0) -> SampledBatch:
        size = len(self._items)
        if size == 0:
            raise ValueError("cannot sample from an empty buffer")
        if batch > size:
            raise ValueError(f"batch {batch} exceeds buffer size {size}")
        c = self.recent_range(batch, round_fraction)
        eligible = np.flatnonzero(self._insert_ids[:size] >= self._total - c)
        scaled = self._priorities[eligible] ** self.alpha
        probs = scaled / scaled.sum()
        picks = self._rng.choice(eligible.size, size=batch, p=probs)
        indices = eligible[picks]
        weights = (eligible.size * probs[picks]) ** (-self.beta)
        weights = weights / weights.max()
        items = [self._items[i] for i in indices]
        return SampledBatch(
            indices=indices,
            states=np.stack([t.state for t in items]),
            actions_raw=np.stack([t.action_raw for t in items]),
            rewards=np.array([t.reward for t in items]),
            next_states=np.stack([t.next_state for t in items]),
            weights=weights,
        )

    def update_priorities(self, indices: np.ndarray, td_errors: np.ndarray) -> None:
        new = np.abs(np.asarray(td_errors, dtype=np.float64)) + self.priority_eps
        if not np.all(np.isfinite(new)):
            raise ValueError("non-finite TD errors")
        self._priorities[np.asarray(indices)] = new
        self._max_priority = max(self._max_priority, float(new.max()))

    @property
    def priorities(self) -> np.ndarray:
        """Read-only view of the live priorities (inspection only)."""
        return self._priorities[: len(self._items)].copy()
