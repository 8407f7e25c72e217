from dataclasses import dataclass

import numpy as np
import pytest

from prefrl.approximator import LayerSpec
from prefrl.envs import GridWorldConfig, rollout_many
from prefrl.reward_model import RewardModel


@dataclass(eq=False)
class Seg:
    """Minimal trajectory stand-in: only the reward-model keys."""

    keys: np.ndarray
    id: int = -1

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.int64)

    def __len__(self):
        return len(self.keys)


def table_model(rewards, embeddings=None, output_bound=1.0):
    """A reward model whose per-key reward and embedding are set exactly.

    Inputs are one-hot keys; the first (identity) layer stores the embedding,
    and the output layer reads its first coordinate through tanh.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    n = len(rewards)
    if embeddings is None:
        embeddings = np.zeros((n, 2))
        embeddings[:, 0] = np.arctanh(rewards / output_bound)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    width = embeddings.shape[1]
    spec = [LayerSpec(n, width, "identity"), LayerSpec(width, 1, "tanh")]
    w_out = np.zeros(width)
    w_out[0] = 1.0
    params = np.concatenate([embeddings.ravel(), np.zeros(width), w_out, [0.0]])
    return RewardModel(spec, params, np.eye(n), output_bound)


def small_model(seed, cfg=None, hidden=(8, 8)):
    cfg = cfg or GridWorldConfig(width=4, height=4, goal=(3, 3))
    rng = np.random.default_rng(seed)
    return RewardModel.create(cfg.feature_table(), rng, hidden), cfg


def random_trajectories(cfg, n, rng, horizon=None, q=None):
    horizon = horizon or min(cfg.episode_cap, 50)
    q = np.zeros((cfg.n_cells, 4)) if q is None else q
    return rollout_many(cfg, q, 1.0, n, horizon, rng)


@pytest.fixture
def grid():
    return GridWorldConfig()
