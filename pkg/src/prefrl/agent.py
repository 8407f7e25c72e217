"""Tabular soft Q-learning policy and the trajectory bank it learns from.

Nothing here reads ground-truth rewards: the bank keeps a learner-facing
reward array that only ``relabel`` (or an explicit assignment by the caller)
writes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import N_ACTIONS, soft_q_update


class NonFiniteTargetError(FloatingPointError):
    pass


class TrajectoryBank:
    """Insertion-ordered ring buffer of fixed-length trajectories."""

    def __init__(self, capacity: int, horizon: int):
        if capacity <= 0:
            raise ValueError("bank capacity must be positive")
        self.capacity = capacity
        self.horizon = horizon
        self.cells = np.zeros((capacity, horizon), np.int64)
        self.actions = np.zeros((capacity, horizon), np.int64)
        self.boot_cells = np.zeros((capacity, horizon), np.int64)
        self.rewards = np.zeros((capacity, horizon), np.float64)
        self._items: list = [None] * capacity
        self.inserted = 0

    def __len__(self) -> int:
        return min(self.inserted, self.capacity)

    def _slot_order(self) -> np.ndarray:
        n = len(self)
        first = self.inserted - n
        return (np.arange(first, self.inserted) % self.capacity)

    def add(self, trajectory, rewards: np.ndarray | None = None) -> int:
        if len(trajectory) != self.horizon:
            raise ValueError(f"trajectory length {len(trajectory)} != bank horizon {self.horizon}")
        slot = self.inserted % self.capacity
        self.cells[slot] = trajectory.cells
        self.actions[slot] = trajectory.actions
        self.boot_cells[slot] = trajectory.boot_cells
        self.rewards[slot] = 0.0 if rewards is None else rewards
        self._items[slot] = trajectory
        self.inserted += 1
        return slot

    def trajectories(self) -> list:
        """Oldest first."""
        return [self._items[s] for s in self._slot_order()]

    def last(self, k: int) -> list:
        """The ``k`` most recently added trajectories, oldest first."""
        order = self._slot_order()
        return [self._items[s] for s in order[max(0, len(order) - k):]]

    def last_slots(self, k: int) -> np.ndarray:
        order = self._slot_order()
        return order[max(0, len(order) - k):]

    def __getitem__(self, i):
        return self._items[self._slot_order()[i]]

    def active_slots(self) -> np.ndarray:
        return self._slot_order()

    def keys(self, slots=None) -> np.ndarray:
        slots = self.active_slots() if slots is None else slots
        return self.cells[slots] * N_ACTIONS + self.actions[slots]

    def sample_transitions(self, n: int, rng: np.random.Generator):
        """Uniform transitions: ``(cells, actions, rewards, boot_cells)``."""
        slots = self.active_slots()
        s = slots[rng.integers(0, len(slots), n)]
        t = rng.integers(0, self.horizon, n)
        return self.cells[s, t], self.actions[s, t], self.rewards[s, t], self.boot_cells[s, t]

    def mean_reward(self) -> float:
        slots = self.active_slots()
        return float(self.rewards[slots].mean()) if len(slots) else 0.0


@dataclass
class SoftQPolicy:
    """Q table over grid cells with Boltzmann action selection.

    ``entropy_baseline`` subtracts ``T * log |A|`` from the soft value, which
    makes an all-zero table the fixed point under zero reward.
    """

    q: np.ndarray
    temperature: float = 1.0
    gamma: float = 0.99
    alpha: float = 0.1
    entropy_baseline: bool = True

    @classmethod
    def zeros(cls, n_states: int, n_actions: int = N_ACTIONS, **kwargs) -> "SoftQPolicy":
        return cls(np.zeros((n_states, n_actions)), **kwargs)

    def probabilities(self, state: int) -> np.ndarray:
        row = self.q[state]
        z = np.exp((row - row.max()) / self.temperature)
        return z / z.sum()

    def soft_value(self, states) -> np.ndarray:
        rows = self.q[states]
        m = rows.max(axis=-1)
        lse = m + self.temperature * np.log(np.exp((rows - m[..., None]) / self.temperature).sum(axis=-1))
        return lse - self._baseline()

    def _baseline(self) -> float:
        return self.temperature * np.log(self.q.shape[1]) if self.entropy_baseline else 0.0

    def copy(self) -> "SoftQPolicy":
        return SoftQPolicy(self.q.copy(), self.temperature, self.gamma, self.alpha,
                           self.entropy_baseline)


def act(policy: SoftQPolicy, state: int, rng: np.random.Generator | None = None,
        greedy: bool = False) -> int:
    if greedy:
        return int(np.argmax(policy.q[state]))
    if rng is None:
        raise ValueError("stochastic action selection needs an rng")
    return int(rng.choice(policy.q.shape[1], p=policy.probabilities(state)))


def update_policy(policy: SoftQPolicy, cells, actions, rewards, boot_cells) -> SoftQPolicy:
    """One synchronous soft-Q step on a batch of learner transitions (in place)."""
    baseline = np.log(policy.q.shape[1]) if policy.entropy_baseline else 0.0
    backup = policy.q.copy()
    td = soft_q_update(policy.q, cells, actions, rewards, boot_cells, policy.alpha,
                       policy.gamma, policy.temperature, baseline)
    if not np.all(np.isfinite(td)):
        policy.q[...] = backup
        bad = int(np.sum(~np.isfinite(td)))
        raise NonFiniteTargetError(
            f"{bad} non-finite soft-Q targets (temperature={policy.temperature}, "
            f"reward range=({np.min(rewards)}, {np.max(rewards)}))")
    return policy


def relabel(bank: TrajectoryBank, reward_model) -> int:
    """Overwrite every stored learner reward with the model's current reward."""
    slots = bank.active_slots()
    if len(slots) == 0:
        return 0
    keys = bank.keys(slots)
    bank.rewards[slots] = reward_model.rewards_for(keys)
    return int(keys.size)
