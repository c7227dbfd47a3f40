from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Transition:
    obs: tuple[float, float]
    action_squashed: float
    reward: float
    next_obs: tuple[float, float]
    done: bool


@dataclass
class Batch:
    obs: np.ndarray  # (B, 2) volts
    action: np.ndarray  # (B,)
    reward: np.ndarray  # (B,)
    next_obs: np.ndarray  # (B, 2)
    done: np.ndarray  # (B,) float 0/1

    def __len__(self):
        return len(self.reward)


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions with uniform batch sampling."""

    def __init__(self, capacity: int = 100_000, obs_dim: int = 2):
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_dim))
        self.action = np.zeros(capacity)
        self.reward = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, obs_dim))
        self.done = np.zeros(capacity)
        self.inserted = 0

    def __len__(self):
        return min(self.inserted, self.capacity)

    def add(self, t: Transition) -> None:
        i = self.inserted % self.capacity
        self.obs[i] = t.obs
        self.action[i] = t.action_squashed
        self.reward[i] = t.reward
        self.next_obs[i] = t.next_obs
        self.done[i] = float(t.done)
        self.inserted += 1

    def extend(self, transitions) -> None:
        for t in transitions:
            self.add(t)

    def _ordered_indices(self) -> np.ndarray:
        n = len(self)
        start = self.inserted - n
        return (np.arange(start, self.inserted)) % self.capacity

    def contents(self) -> list[Transition]:
        """All stored transitions, oldest first."""
        return [
            Transition(tuple(self.obs[i]), float(self.action[i]), float(self.reward[i]),
                       tuple(self.next_obs[i]), bool(self.done[i]))
            for i in self._ordered_indices()
        ]

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        n = len(self)
        if batch_size > n:
            raise ValueError(f"cannot sample {batch_size} from buffer of size {n}")
        idx = rng.choice(n, size=batch_size, replace=False)
        return Batch(self.obs[idx], self.action[idx], self.reward[idx], self.next_obs[idx], self.done[idx])
