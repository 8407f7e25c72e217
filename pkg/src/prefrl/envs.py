"""Gridworld environment and trajectory containers.

The environment's reward is the hidden ground truth. Learner code only ever
sees ``Trajectory.learner_view()`` (or the bank's arrays built from it); the
``true_rewards`` channel is read by the oracle and the evaluator.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .kernels import DX, DY, N_ACTIONS, rollout_batch

ACTION_NAMES = ("right", "up", "left", "down")


class EpisodeDoneError(RuntimeError):
    """``step`` was called after the episode ended."""


@dataclass(frozen=True)
class GridWorldConfig:
    width: int = 10
    height: int = 10
    start: tuple[int, int] = (0, 0)
    goal: tuple[int, int] = (9, 9)
    reward_mode: str = "sparse"
    episode_cap: int = 50
    slip_probability: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "start", tuple(int(v) for v in self.start))
        object.__setattr__(self, "goal", tuple(int(v) for v in self.goal))
        if self.width <= 0 or self.height <= 0:
            raise ValueError("grid dimensions must be positive")
        for name in ("start", "goal"):
            x, y = getattr(self, name)
            if not (0 <= x < self.width and 0 <= y < self.height):
                raise ValueError(f"{name} {getattr(self, name)} lies outside the grid")
        if self.start == self.goal:
            raise ValueError("start and goal must differ")
        if self.reward_mode not in ("sparse", "shaped"):
            raise ValueError(f"reward_mode must be 'sparse' or 'shaped', got {self.reward_mode!r}")
        if self.episode_cap <= 0:
            raise ValueError("episode_cap must be positive")
        if not 0.0 <= self.slip_probability < 1.0:
            raise ValueError("slip_probability must lie in [0, 1)")

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def cell(self, x: int, y: int) -> int:
        return y * self.width + x

    def xy(self, cell: int) -> tuple[int, int]:
        return cell % self.width, cell // self.width

    @property
    def start_cell(self) -> int:
        return self.cell(*self.start)

    @property
    def goal_cell(self) -> int:
        return self.cell(*self.goal)

    def observation(self, cell) -> np.ndarray:
        """Normalised ``(x / width, y / height)`` for one cell or an array of cells."""
        cell = np.asarray(cell)
        return np.stack([(cell % self.width) / self.width,
                         (cell // self.width) / self.height], axis=-1).astype(np.float64)

    def feature_table(self) -> np.ndarray:
        """Reward-model inputs for every ``key = cell * 4 + action``.

        Row layout: normalised position followed by the one-hot action.
        """
        keys = np.arange(self.n_cells * N_ACTIONS)
        obs = self.observation(keys // N_ACTIONS)
        onehot = np.eye(N_ACTIONS)[keys % N_ACTIONS]
        return np.concatenate([obs, onehot], axis=1)

    def true_reward(self, next_x: int, next_y: int) -> float:
        gx, gy = self.goal
        if self.reward_mode == "sparse":
            return 1.0 if (next_x, next_y) == (gx, gy) else 0.0
        return -(abs(next_x - gx) + abs(next_y - gy)) / (self.width + self.height)


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    next_state: np.ndarray
    true_reward: float
    done: bool


@dataclass(frozen=True)
class LearnerTransition:
    state: np.ndarray
    action: int
    next_state: np.ndarray
    done: bool


_traj_ids = itertools.count()


@dataclass(eq=False)
class Trajectory:
    """A length-H segment. Cells and actions are integer arrays of shape (H,)."""

    cells: np.ndarray
    actions: np.ndarray
    next_cells: np.ndarray
    boot_cells: np.ndarray
    dones: np.ndarray
    _true_rewards: np.ndarray = field(repr=False)
    config: GridWorldConfig = field(repr=False)
    id: int = -1
    policy_stamp: int = 0

    def __post_init__(self):
        if self.id < 0:
            self.id = next(_traj_ids)
        h = len(self.cells)
        for name in ("actions", "next_cells", "boot_cells", "dones", "_true_rewards"):
            if len(getattr(self, name)) != h:
                raise ValueError(f"trajectory field {name} has length "
                                 f"{len(getattr(self, name))}, expected {h}")

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def keys(self) -> np.ndarray:
        """Reward-model input keys ``cell * 4 + action``."""
        return self.cells * N_ACTIONS + self.actions

    @property
    def true_rewards(self) -> np.ndarray:
        """Oracle/evaluator channel. Learner code must not read this."""
        return self._true_rewards

    def true_return(self) -> float:
        return float(self.true_rewards.sum())

    @property
    def states(self) -> np.ndarray:
        return self.config.observation(self.cells)

    @property
    def transitions(self) -> list[Transition]:
        obs = self.config.observation(self.cells)
        nxt = self.config.observation(self.next_cells)
        return [Transition(obs[t], int(self.actions[t]), nxt[t],
                           float(self.true_rewards[t]), bool(self.dones[t]))
                for t in range(len(self))]

    def learner_view(self) -> "LearnerTrajectory":
        return LearnerTrajectory(self.cells, self.actions, self.next_cells,
                                 self.boot_cells, self.dones, self.config,
                                 self.id, self.policy_stamp)

    def render(self) -> dict:
        return render_trajectory(self)


@dataclass(eq=False)
class LearnerTrajectory:
    """Trajectory without the ground-truth reward channel."""

    cells: np.ndarray
    actions: np.ndarray
    next_cells: np.ndarray
    boot_cells: np.ndarray
    dones: np.ndarray
    config: GridWorldConfig = field(repr=False)
    id: int = -1
    policy_stamp: int = 0

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def keys(self) -> np.ndarray:
        return self.cells * N_ACTIONS + self.actions

    def render(self) -> dict:
        return render_trajectory(self)

    @property
    def transitions(self) -> list[LearnerTransition]:
        obs = self.config.observation(self.cells)
        nxt = self.config.observation(self.next_cells)
        return [LearnerTransition(obs[t], int(self.actions[t]), nxt[t], bool(self.dones[t]))
                for t in range(len(self))]


def render_trajectory(traj) -> dict:
    """JSON payload ``{id, cells: [{x, y, action}]}`` for the label UI."""
    xs = traj.cells % traj.config.width
    ys = traj.cells // traj.config.width
    return {
        "id": int(traj.id),
        "cells": [{"x": int(x), "y": int(y), "action": ACTION_NAMES[int(a)]}
                  for x, y, a in zip(xs, ys, traj.actions)],
    }


class GridWorld:
    """Single-owner gridworld with reset/step semantics."""

    def __init__(self, config: GridWorldConfig | None = None, seed: int | None = None):
        self.config = config or GridWorldConfig()
        self.rng = np.random.default_rng(seed)
        self._cell = self.config.start_cell
        self._t = 0
        self._done = False

    @property
    def position(self) -> tuple[int, int]:
        return self.config.xy(self._cell)

    @property
    def cell(self) -> int:
        return self._cell

    def reset(self) -> np.ndarray:
        self._cell = self.config.start_cell
        self._t = 0
        self._done = False
        return self.config.observation(self._cell)

    def step(self, action: int) -> Transition:
        if self._done:
            raise EpisodeDoneError("episode is over; call reset()")
        if not 0 <= action < N_ACTIONS:
            raise ValueError(f"action must be in [0, {N_ACTIONS}), got {action}")
        cfg = self.config
        move = int(action)
        if self.rng.random() < cfg.slip_probability:
            move = (move + (1 if self.rng.random() < 0.5 else 3)) % 4
        x, y = cfg.xy(self._cell)
        nx = min(max(x + int(DX[move]), 0), cfg.width - 1)
        ny = min(max(y + int(DY[move]), 0), cfg.height - 1)
        state = cfg.observation(self._cell)
        self._cell = cfg.cell(nx, ny)
        self._t += 1
        at_goal = self._cell == cfg.goal_cell
        self._done = at_goal or self._t >= cfg.episode_cap
        return Transition(state, int(action), cfg.observation(self._cell),
                          cfg.true_reward(nx, ny), self._done)


def rollout(env: GridWorld, policy, horizon: int, policy_stamp: int = 0) -> Trajectory:
    """Collect exactly ``horizon`` transitions starting from a reset.

    ``policy(observation) -> action``. A finished episode is followed by a
    reset inside the same segment.
    """
    cfg = env.config
    if horizon > cfg.episode_cap:
        raise ValueError(f"horizon {horizon} exceeds episode_cap {cfg.episode_cap}")
    cells, actions, next_cells, boot, dones, rewards = ([] for _ in range(6))
    obs = env.reset()
    for _ in range(horizon):
        cells.append(env.cell)
        a = int(policy(obs))
        tr = env.step(a)
        actions.append(a)
        next_cells.append(env.cell)
        rewards.append(tr.true_reward)
        dones.append(tr.done)
        at_goal = env.cell == cfg.goal_cell
        boot.append(cfg.start_cell if at_goal else env.cell)
        obs = env.reset() if tr.done else tr.next_state
    arr = lambda v, dt=np.int64: np.asarray(v, dtype=dt)
    return Trajectory(arr(cells), arr(actions), arr(next_cells), arr(boot),
                      arr(dones, bool), arr(rewards, np.float64), cfg,
                      policy_stamp=policy_stamp)


def rollout_many(config: GridWorldConfig, q: np.ndarray, temperature: float, n: int,
                 horizon: int, rng: np.random.Generator, greedy: bool = False,
                 policy_stamp: int = 0) -> list[Trajectory]:
    """Batched rollouts of a Boltzmann (or greedy) policy over a Q table."""
    if horizon > config.episode_cap:
        raise ValueError(f"horizon {horizon} exceeds episode_cap {config.episode_cap}")
    u_act = rng.random((n, horizon))
    u_slip = rng.random((n, horizon))
    u_perp = rng.random((n, horizon))
    cells, actions, nxt, boot, rewards, dones = rollout_batch(
        q, temperature, greedy, config.width, config.height, config.start_cell,
        config.goal_cell, config.slip_probability, config.reward_mode == "sparse",
        config.episode_cap, u_act, u_slip, u_perp)
    return [Trajectory(cells[k], actions[k], nxt[k], boot[k], dones[k], rewards[k],
                       config, policy_stamp=policy_stamp)
            for k in range(n)]
