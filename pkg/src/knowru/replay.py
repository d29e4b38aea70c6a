"""Joint-transition ring buffer with uniform sampling (with replacement)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NotReadyError(RuntimeError):
    """Sampling from an empty buffer."""


@dataclass
class Transition:
    obs: list          # per-agent observation vectors
    actions: list      # per-agent action logits
    rewards: np.ndarray
    next_obs: list
    done: bool


@dataclass
class Batch:
    """Column-major arrays: ``obs[i]`` has shape ``(obs_dim_i, B)``."""

    obs: list
    actions: list
    rewards: np.ndarray  # (n_agents, B)
    next_obs: list
    done: np.ndarray  # (B,)

    @property
    def size(self) -> int:
        return self.done.shape[0]

    def slice(self, start: int, stop: int) -> "Batch":
        return Batch(
            [o[:, start:stop] for o in self.obs],
            [a[:, start:stop] for a in self.actions],
            self.rewards[:, start:stop],
            [o[:, start:stop] for o in self.next_obs],
            self.done[start:stop],
        )


class ReplayBuffer:
    def __init__(self, obs_dims, action_dim=5, capacity=1_000_000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.obs_dims = [int(d) for d in obs_dims]
        self.action_dim = action_dim
        self.capacity = int(capacity)
        self._alloc(min(self.capacity, 1024))
        self._cursor = 0
        self._size = 0

    def _alloc(self, rows: int) -> None:
        # storage grows geometrically; the ring only wraps once at capacity
        n = len(self.obs_dims)
        old = getattr(self, "_rows", 0)
        fresh = (
            [np.zeros((rows, d)) for d in self.obs_dims],
            [np.zeros((rows, d)) for d in self.obs_dims],
            np.zeros((n, rows, self.action_dim)),
            np.zeros((rows, n)),
            np.zeros(rows),
        )
        if old:
            for i in range(n):
                fresh[0][i][:old] = self._obs[i]
                fresh[1][i][:old] = self._next[i]
            fresh[2][:, :old] = self._act
            fresh[3][:old] = self._rew
            fresh[4][:old] = self._done
        self._obs, self._next, self._act, self._rew, self._done = fresh
        self._rows = rows

    def __len__(self) -> int:
        return self._size

    @property
    def n_agents(self) -> int:
        return len(self.obs_dims)

    def push(self, tr: Transition) -> None:
        n = self.n_agents
        if len(tr.obs) != n or len(tr.next_obs) != n or len(tr.actions) != n:
            raise ValueError(f"transition must carry data for {n} agents")
        if len(np.asarray(tr.rewards).reshape(-1)) != n:
            raise ValueError(f"expected {n} rewards")
        for i, d in enumerate(self.obs_dims):
            if np.shape(tr.obs[i]) != (d,) or np.shape(tr.next_obs[i]) != (d,):
                raise ValueError(f"agent {i}: observation must have shape ({d},)")
            if np.shape(tr.actions[i]) != (self.action_dim,):
                raise ValueError(f"agent {i}: action must have shape ({self.action_dim},)")
        k = self._cursor
        if k >= self._rows:
            self._alloc(min(self.capacity, 2 * self._rows))
        for i in range(n):
            self._obs[i][k] = tr.obs[i]
            self._next[i][k] = tr.next_obs[i]
            self._act[i, k] = tr.actions[i]
        self._rew[k] = tr.rewards
        self._done[k] = float(tr.done)
        self._cursor = (k + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def _slot(self, age_order: int) -> int:
        """Storage slot of the ``age_order``-th oldest live transition."""
        start = self._cursor if self._size == self.capacity else 0
        return (start + age_order) % self.capacity

    def sample_indices(self, n: int, rng) -> np.ndarray:
        """Uniform draws with replacement, so ``n`` may exceed the size."""
        if self._size == 0:
            raise NotReadyError("buffer is empty")
        if n < 1:
            raise ValueError("sample size must be >= 1")
        return rng.integers(0, self._size, size=n)

    def get(self, age_order: int) -> Transition:
        """Transition by age, 0 being the oldest still stored."""
        if not 0 <= age_order < self._size:
            raise IndexError(age_order)
        k = self._slot(age_order)
        n = self.n_agents
        return Transition(
            [self._obs[i][k].copy() for i in range(n)],
            [self._act[i, k].copy() for i in range(n)],
            self._rew[k].copy(),
            [self._next[i][k].copy() for i in range(n)],
            bool(self._done[k]),
        )

    def sample(self, n: int, rng) -> list:
        return [self.get(int(j)) for j in self.sample_indices(n, rng)]

    def sample_batch(self, n: int, rng) -> Batch:
        start = self._cursor if self._size == self.capacity else 0
        slots = (start + self.sample_indices(n, rng)) % self.capacity
        return Batch(
            [o[slots].T.copy() for o in self._obs],
            [self._act[i, slots].T.copy() for i in range(self.n_agents)],
            self._rew[slots].T.copy(),
            [o[slots].T.copy() for o in self._next],
            self._done[slots].copy(),
        )
