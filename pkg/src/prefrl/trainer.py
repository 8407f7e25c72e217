"""Preference-based RL outer loop.

Collect segments into the bank, ask for preferences while budget remains,
fit the reward model on the weighted loss, relabel the bank, and keep
training the soft-Q policy on the relabelled transitions.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import approximator
from .agent import SoftQPolicy, TrajectoryBank, relabel, update_policy
from .envs import GridWorldConfig, Trajectory, rollout_many
from .metrics import MetricsRow, MetricsWriter, compute_reward_spearman, sampled_spearman
from .oracle import ABSTAIN, QueryQueue, QueueFullError, SyntheticOracle
from .reward_model import (
    ActionDistanceDataset, PreferenceDataset, PreferenceTuple, RewardModel,
    combined_loss, make_triplets, preference_probabilities,
)

log = logging.getLogger(__name__)

LOSS_ARMS = ("ce", "ce,triplet", "ce,ad", "ce,triplet,ad", "true-reward")


class BankTooSmallError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainerConfig:
    # schedule
    horizon: int = 50
    total_steps: int = 60_000
    warmup_steps: int = 2_500
    steps_between_sessions: int = 2_500
    chunk_trajectories: int = 10
    # feedback
    max_feedback: int = 200
    queries_per_session: int = 10
    sampler: str = "uniform"
    ensemble_size: int = 1
    query_window: int = 100
    # reward learning
    losses: str = "ce,triplet,ad"
    lambda_ce: float = 1.0
    lambda_t: float = 0.5
    lambda_a: float = 3.0
    margin: float = 1.0
    triplet_mode: str = "symmetric_squared"
    reward_update_epochs: int = 20
    reward_batch_size: int = 32
    anchors_per_update: int = 32
    tuples_per_anchor: int = 16
    anchor_window: int = 100
    k_window: int = 10
    pairs_per_trajectory: int = 20
    reward_hidden: tuple[int, ...] = (64, 64)
    reward_optimizer: str = "adam"
    reward_lr: float = 1e-3
    output_bound: float = 1.0
    # policy
    gamma: float = 0.99
    alpha: float = 0.1
    temperature_start: float = 1.0
    temperature_end: float = 0.05
    entropy_baseline: bool = True
    center_rewards: bool = True
    policy_batches_per_chunk: int = 100
    policy_batch_size: int = 64
    bank_capacity: int = 2000
    # evaluation
    eval_episodes: int = 20
    spearman_sample_size: int = 1000
    spearman_window: int = 50
    # oracle
    oracle: str = "synthetic"
    flip_probability: float = 0.0
    queue_capacity: int = 8
    min_session_seconds: float = 0.0
    checkpoint_every: int = 0

    def __post_init__(self):
        self.reward_hidden = tuple(int(h) for h in self.reward_hidden)
        self.validate()

    def validate(self) -> None:
        positive = ("horizon", "total_steps", "steps_between_sessions", "chunk_trajectories",
                    "queries_per_session", "ensemble_size", "reward_update_epochs",
                    "reward_batch_size", "anchors_per_update", "tuples_per_anchor",
                    "k_window", "pairs_per_trajectory", "policy_batch_size", "bank_capacity",
                    "eval_episodes", "spearman_sample_size", "spearman_window", "queue_capacity")
        errors = [f"{name} must be positive (got {getattr(self, name)})"
                  for name in positive if getattr(self, name) <= 0]
        for name in ("max_feedback", "warmup_steps", "policy_batches_per_chunk",
                     "query_window", "anchor_window", "checkpoint_every"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be >= 0 (got {getattr(self, name)})")
        for name in ("lambda_ce", "lambda_t", "lambda_a", "margin"):
            if getattr(self, name) < 0:
                errors.append(f"{name} must be >= 0 (got {getattr(self, name)})")
        if self.losses not in LOSS_ARMS:
            errors.append(f"losses must be one of {LOSS_ARMS} (got {self.losses!r})")
        if self.sampler not in ("uniform", "disagreement"):
            errors.append(f"sampler must be 'uniform' or 'disagreement' (got {self.sampler!r})")
        if self.sampler == "disagreement" and self.ensemble_size < 2:
            errors.append("the disagreement sampler needs ensemble_size >= 2")
        if self.triplet_mode not in ("symmetric_squared", "literal_eq3"):
            errors.append(f"unknown triplet_mode {self.triplet_mode!r}")
        if self.oracle not in ("synthetic", "human"):
            errors.append(f"oracle must be 'synthetic' or 'human' (got {self.oracle!r})")
        if not 0 < self.gamma < 1:
            errors.append("gamma must lie in (0, 1)")
        if self.temperature_start <= 0 or self.temperature_end <= 0:
            errors.append("temperatures must be positive")
        if self.steps_between_sessions % self.horizon or self.warmup_steps % self.horizon:
            errors.append("steps_between_sessions and warmup_steps must be multiples of horizon")
        if errors:
            raise ValueError("invalid trainer config: " + "; ".join(errors))

    @property
    def true_reward(self) -> bool:
        return self.losses == "true-reward"

    def loss_weights(self) -> tuple[float, float, float]:
        """Effective (ce, triplet, ad) weights for the selected arm."""
        if self.true_reward:
            return 0.0, 0.0, 0.0
        parts = self.losses.split(",")
        return (self.lambda_ce,
                self.lambda_t if "triplet" in parts else 0.0,
                self.lambda_a if "ad" in parts else 0.0)


def temperature_at(config: TrainerConfig, step: int) -> float:
    frac = min(max(step / config.total_steps, 0.0), 1.0)
    return config.temperature_start * (config.temperature_end / config.temperature_start) ** frac


# --------------------------------------------------------------------------
# dataset construction and query selection

def build_dp(bank: TrajectoryBank, k_window: int, pairs_per_trajectory: int,
             rng: np.random.Generator) -> ActionDistanceDataset:
    """Index pairs ``i < j`` from the ``k_window`` newest trajectories, ``d = j - i``."""
    trajs = bank.last(k_window)
    if not trajs:
        return ActionDistanceDataset()
    cols = {name: [] for name in ("cell_i", "action_i", "cell_j", "action_j",
                                  "distance", "source_id", "index_i", "index_j")}
    for traj in trajs:
        h = len(traj)
        ij = np.sort(np.stack([rng.choice(h, size=2, replace=False)
                               for _ in range(pairs_per_trajectory)]), axis=1)
        i, j = ij[:, 0], ij[:, 1]
        cols["cell_i"].append(traj.cells[i])
        cols["action_i"].append(traj.actions[i])
        cols["cell_j"].append(traj.cells[j])
        cols["action_j"].append(traj.actions[j])
        cols["distance"].append((j - i).astype(np.float64))
        cols["source_id"].append(np.full(len(i), traj.id, np.int64))
        cols["index_i"].append(i)
        cols["index_j"].append(j)
    return ActionDistanceDataset(**{k: np.concatenate(v) for k, v in cols.items()})


def sample_queries(pool: Sequence, n: int, sampler: str = "uniform",
                   reward_models: Sequence[RewardModel] = (),
                   rng: np.random.Generator | None = None) -> list[tuple]:
    """Pick ``n`` distinct unordered pairs of distinct trajectories from ``pool``.

    ``disagreement`` scores ``10 n`` uniform candidates by the across-model
    standard deviation of the preference probability and keeps the top ``n``
    (ties keep candidate order).
    """
    pool = list(pool)
    if len(pool) < 2:
        raise BankTooSmallError(f"need at least 2 trajectories to form a query, have {len(pool)}")
    if rng is None:
        raise ValueError("query sampling needs an rng")
    max_pairs = len(pool) * (len(pool) - 1) // 2
    want = n if sampler == "uniform" else 10 * n
    want = min(want, max_pairs)
    chosen: list[tuple[int, int]] = []
    seen = set()
    if want == max_pairs:
        chosen = [(i, j) for i in range(len(pool)) for j in range(i + 1, len(pool))]
        chosen = [chosen[k] for k in rng.permutation(len(chosen))]
    else:
        while len(chosen) < want:
            i, j = rng.choice(len(pool), size=2, replace=False)
            key = (min(i, j), max(i, j))
            if key in seen:
                continue
            seen.add(key)
            chosen.append((int(i), int(j)))
    pairs = [(pool[i], pool[j]) for i, j in chosen]
    if sampler == "uniform":
        return pairs[:n]
    if sampler != "disagreement":
        raise ValueError(f"unknown sampler {sampler!r}")
    if len(reward_models) < 2:
        raise ValueError("disagreement sampling needs at least two reward models")
    probs = np.stack([preference_probabilities(m, pairs) for m in reward_models])
    spread = probs.std(axis=0)
    order = np.argsort(-spread, kind="stable")
    return [pairs[k] for k in order[:n]]


# --------------------------------------------------------------------------
# reward learning

def reward_update_session(models: Sequence[RewardModel], optimizers, dataset: PreferenceDataset,
                          bank: TrajectoryBank, config: TrainerConfig,
                          rng: np.random.Generator,
                          queried_ids: set | frozenset = frozenset()) -> list[dict]:
    """Fit every ensemble member for ``reward_update_epochs`` epochs.

    Returns one dict of mean component losses per epoch (averaged over
    members and minibatches). Components whose weight is zero are neither
    sampled nor evaluated, so a CE-only arm follows exactly the code path of
    plain cross-entropy training.
    """
    if len(dataset) == 0:
        raise ValueError("reward update needs at least one labelled tuple")
    lam_ce, lam_t, lam_a = config.loss_weights()
    dp = build_dp(bank, config.k_window, config.pairs_per_trajectory, rng) if lam_a > 0 else None
    pool = []
    if lam_t > 0:
        recent = bank.last(config.anchor_window) if config.anchor_window else bank.trajectories()
        pool = [t for t in recent if t.id not in queried_ids]
    history = []
    for _ in range(config.reward_update_epochs):
        sums = {"ce": 0.0, "triplet": 0.0, "ad": 0.0}
        steps = 0
        for k, (model, opt) in enumerate(zip(models, optimizers)):
            order = rng.permutation(len(dataset))
            for start in range(0, len(order), config.reward_batch_size):
                batch = [dataset[i] for i in order[start:start + config.reward_batch_size]]
                triplets = None
                if lam_t > 0 and pool:
                    pick = rng.choice(len(pool), size=min(config.anchors_per_update, len(pool)),
                                      replace=False)
                    triplets = make_triplets([pool[i] for i in pick], dataset,
                                             config.tuples_per_anchor, rng)
                loss, grad, comps = combined_loss(
                    model, batch, triplets, dp, lam_ce, lam_t, lam_a,
                    config.triplet_mode, config.margin)
                if not np.isfinite(loss):
                    raise NonFiniteLossError(f"reward loss became {loss} (components {comps})")
                model.params = opt.step(model.params, grad)
                for name, v in comps.items():
                    sums[name] += v
                steps += 1
        history.append({name: v / steps for name, v in sums.items()})
    return history


# --------------------------------------------------------------------------
# the loop

def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _set_rng_state(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state


_RNG_NAMES = ("collect", "policy", "reward", "query", "eval", "oracle")


class Trainer:
    """Owns every piece of mutable run state; single control loop."""

    def __init__(self, config: TrainerConfig, env_config: GridWorldConfig | None = None,
                 seed: int = 0, run_id: str = "run", queue: QueryQueue | None = None):
        self.config = config
        self.env_config = env_config or GridWorldConfig()
        if config.horizon > self.env_config.episode_cap:
            raise ValueError("horizon exceeds the environment's episode cap")
        self.seed = seed
        self.run_id = run_id
        children = np.random.SeedSequence(seed).spawn(len(_RNG_NAMES) + 1)
        self.rngs = {name: np.random.default_rng(s) for name, s in zip(_RNG_NAMES, children)}
        init_rng = np.random.default_rng(children[-1])

        features = self.env_config.feature_table()
        self.models = [RewardModel.create(features, init_rng, config.reward_hidden,
                                          config.output_bound)
                       for _ in range(config.ensemble_size)]
        self.optimizers = [approximator.make_optimizer(config.reward_optimizer, config.reward_lr)
                           for _ in self.models]
        self.policy = SoftQPolicy.zeros(self.env_config.n_cells, gamma=config.gamma,
                                        alpha=config.alpha,
                                        temperature=config.temperature_start,
                                        entropy_baseline=config.entropy_baseline)
        self.bank = TrajectoryBank(config.bank_capacity, config.horizon)
        self.dataset = PreferenceDataset(config.max_feedback)
        self.queried_ids: set[int] = set()
        if config.oracle == "human":
            self.queue = queue or QueryQueue(config.queue_capacity, config.max_feedback)
            self.oracle = None
        else:
            self.queue = None
            self.oracle = SyntheticOracle(config.flip_probability, self.rngs["oracle"])
        self.global_step = 0
        self.sessions = 0
        self.next_traj_id = 0
        self.last_losses = {"ce": 0.0, "triplet": 0.0, "ad": 0.0}
        self.rows: list[MetricsRow] = []
        self.abstained = 0
        self._reward_table = None

    @property
    def model(self) -> RewardModel:
        return self.models[0]

    # -- collection -------------------------------------------------------

    def _learner_rewards(self, traj: Trajectory) -> np.ndarray:
        if self.config.true_reward:
            # upper baseline: the learner is handed the hidden reward directly
            return traj.true_rewards
        if len(self.dataset) == 0:
            # an unfitted model is noise; acting on it would only steer exploration
            return np.zeros(len(traj))
        if self._reward_table is None:
            self._reward_table = self.model.reward_table()
        return self._reward_table[traj.keys]

    def _collect(self, n_traj: int, random_policy: bool) -> list[Trajectory]:
        cfg = self.config
        if random_policy:
            q = np.zeros_like(self.policy.q)
            temp = 1.0
        else:
            q = self.policy.q
            temp = temperature_at(cfg, self.global_step)
        trajs = rollout_many(self.env_config, q, temp, n_traj, cfg.horizon,
                             self.rngs["collect"], policy_stamp=self.global_step)
        for t in trajs:
            t.id = self.next_traj_id
            self.next_traj_id += 1
            self.bank.add(t, self._learner_rewards(t))
        self.global_step += n_traj * cfg.horizon
        return trajs

    def _policy_updates(self) -> None:
        cfg = self.config
        self.policy.temperature = temperature_at(cfg, self.global_step)
        offset = self.bank.mean_reward() if cfg.center_rewards else 0.0
        rng = self.rngs["policy"]
        for _ in range(cfg.policy_batches_per_chunk):
            s, a, r, s2 = self.bank.sample_transitions(cfg.policy_batch_size, rng)
            update_policy(self.policy, s, a, r - offset, s2)

    def warmup(self) -> None:
        n = self.config.warmup_steps // self.config.horizon
        if n:
            self._collect(n, random_policy=True)

    def collect_phase(self) -> None:
        cfg = self.config
        remaining = cfg.steps_between_sessions // cfg.horizon
        while remaining > 0:
            n = min(cfg.chunk_trajectories, remaining)
            self._collect(n, random_policy=False)
            self._policy_updates()
            remaining -= n

    # -- feedback ---------------------------------------------------------

    def _query_pool(self) -> list:
        if self.config.query_window:
            return self.bank.last(self.config.query_window)
        return self.bank.trajectories()

    def budget_left(self) -> int:
        used = len(self.dataset)
        if self.queue is not None:
            used = self.queue.feedback_used + self.queue.pending_count()
        return max(self.config.max_feedback - used, 0)

    def gather_feedback(self) -> int:
        """Ask for labels; returns the number of tuples added to D_h now."""
        cfg = self.config
        added = 0
        if self.queue is not None:
            for item in self.queue.drain():
                self.dataset.append(item)
                added += 1
        if cfg.true_reward or len(self.bank) < 2:
            return added
        n = min(cfg.queries_per_session, self.budget_left())
        if n <= 0:
            return added
        pairs = sample_queries(self._query_pool(), n, cfg.sampler, self.models, self.rngs["query"])
        for tau0, tau1 in pairs:
            if self.queue is not None:
                try:
                    self.queue.enqueue(tau0, tau1)
                except QueueFullError:
                    break
                self.queried_ids.update((tau0.id, tau1.id))
                continue
            self.queried_ids.update((tau0.id, tau1.id))
            label = self.oracle.label(tau0, tau1)
            if label == ABSTAIN:
                self.abstained += 1
                continue
            if len(self.dataset) >= cfg.max_feedback:
                break
            self.dataset.append(PreferenceTuple(tau0.learner_view(), tau1.learner_view(), label))
            added += 1
        return added

    # -- reward + evaluation ------------------------------------------------

    def update_reward(self) -> None:
        if self.config.true_reward or len(self.dataset) == 0:
            return
        history = reward_update_session(self.models, self.optimizers, self.dataset, self.bank,
                                        self.config, self.rngs["reward"], self.queried_ids)
        self.last_losses = dict(history[-1])
        self._reward_table = None
        relabel(self.bank, self.model)

    def evaluate(self) -> tuple[float, float]:
        """Greedy-policy mean true return over one segment, and success rate."""
        cfg = self.config
        trajs = rollout_many(self.env_config, self.policy.q, 1.0, cfg.eval_episodes, cfg.horizon,
                             self.rngs["eval"], greedy=True)
        goal = self.env_config.goal_cell
        returns = [t.true_return() for t in trajs]
        success = []
        for t in trajs:
            first_end = int(np.argmax(t.dones)) if t.dones.any() else len(t) - 1
            success.append(bool(t.next_cells[first_end] == goal and t.dones[first_end]))
        return float(np.mean(returns)), float(np.mean(success))

    def reward_spearman(self) -> float:
        cfg = self.config
        recent = self.bank.last(cfg.spearman_window)
        if self.config.true_reward:
            slots = self.bank.last_slots(cfg.spearman_window)
            learned = self.bank.rewards[slots]
            true = np.stack([t.true_rewards for t in recent])
            rho, _ = sampled_spearman(learned, true, cfg.spearman_sample_size, self.rngs["eval"])
            return rho
        rho, _ = compute_reward_spearman(self.model, recent, cfg.spearman_sample_size,
                                         self.rngs["eval"])
        return rho

    def session(self) -> MetricsRow:
        t0 = time.monotonic()
        self.gather_feedback()
        self.update_reward()
        ret, success = self.evaluate()
        rho = self.reward_spearman()
        self.sessions += 1
        row = MetricsRow(
            run_id=self.run_id, seed=self.seed, global_step=self.global_step,
            feedback_used=len(self.dataset), eval_true_return=ret, eval_success_rate=success,
            reward_spearman=rho, loss_ce=float(self.last_losses["ce"]),
            loss_t=float(self.last_losses["triplet"]), loss_a=float(self.last_losses["ad"]))
        self.rows.append(row)
        wait = self.config.min_session_seconds - (time.monotonic() - t0)
        if wait > 0:
            time.sleep(wait)
        return row

    def done(self) -> bool:
        return self.global_step >= self.config.total_steps

    def run(self, writer: MetricsWriter | None = None, checkpoint_dir=None,
            on_row: Callable[[MetricsRow], None] | None = None) -> list[MetricsRow]:
        if self.global_step == 0:
            self.warmup()
        while not self.done():
            self.collect_phase()
            row = self.session()
            if writer is not None:
                writer.write(row)
            if on_row is not None:
                on_row(row)
            log.debug("%s step=%d feedback=%d return=%.3f rho=%.3f", self.run_id,
                      row.global_step, row.feedback_used, row.eval_true_return,
                      row.reward_spearman)
            if (checkpoint_dir is not None and self.config.checkpoint_every
                    and self.sessions % self.config.checkpoint_every == 0):
                self.save_checkpoint(checkpoint_dir)
        if checkpoint_dir is not None:
            self.save_checkpoint(checkpoint_dir)
        return self.rows

    def status(self) -> dict:
        used = self.queue.feedback_used if self.queue is not None else len(self.dataset)
        pending = self.queue.pending_count() if self.queue is not None else 0
        return {"feedback_used": used, "max_feedback": self.config.max_feedback,
                "pending_count": pending, "global_step": self.global_step}

    # -- checkpoints -------------------------------------------------------

    def save_checkpoint(self, directory) -> Path:
        """Write everything needed to resume: reward params and optimizer
        moments, Q table, bank, D_h, RNG states and counters."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for k, (m, opt) in enumerate(zip(self.models, self.optimizers)):
            m.save(d / f"reward_model_{k}")
            state = {key: (np.zeros(0) if v is None else np.asarray(v))
                     for key, v in opt.state_dict().items()}
            np.savez(d / f"optimizer_{k}.npz", **state)
        np.savez(d / "policy.npz", q=self.policy.q)
        slots = self.bank.active_slots()
        items = self.bank.trajectories()
        np.savez(
            d / "bank.npz",
            cells=np.stack([t.cells for t in items]) if items else np.zeros((0, self.config.horizon)),
            actions=np.stack([t.actions for t in items]) if items else np.zeros((0, self.config.horizon)),
            next_cells=np.stack([t.next_cells for t in items]) if items else np.zeros((0, self.config.horizon)),
            boot_cells=np.stack([t.boot_cells for t in items]) if items else np.zeros((0, self.config.horizon)),
            dones=np.stack([t.dones for t in items]) if items else np.zeros((0, self.config.horizon)),
            true_rewards=np.stack([t.true_rewards for t in items]) if items else np.zeros((0, self.config.horizon)),
            ids=np.array([t.id for t in items], np.int64),
            stamps=np.array([t.policy_stamp for t in items], np.int64),
            learner_rewards=self.bank.rewards[slots],
        )
        pref = [(t.tau0, t.tau1, t.label) for t in self.dataset]
        np.savez(
            d / "preferences.npz",
            **{f"{side}_{field_}": (np.stack([getattr(p[k], field_) for p in pref])
                                    if pref else np.zeros((0, self.config.horizon), np.int64))
               for k, side in enumerate(("tau0", "tau1"))
               for field_ in ("cells", "actions", "next_cells", "boot_cells", "dones")},
            tau0_id=np.array([p[0].id for p in pref], np.int64),
            tau1_id=np.array([p[1].id for p in pref], np.int64),
            labels=np.array([p[2] for p in pref], np.int64),
        )
        meta = {
            "seed": self.seed,
            "run_id": self.run_id,
            "config": config_to_dict(self.config),
            "env": asdict(self.env_config),
            "global_step": self.global_step,
            "sessions": self.sessions,
            "next_traj_id": self.next_traj_id,
            "bank_inserted": self.bank.inserted,
            "queried_ids": sorted(int(i) for i in self.queried_ids),
            "last_losses": self.last_losses,
            "abstained": self.abstained,
            "temperature": self.policy.temperature,
            "optimizer_t": [int(getattr(opt, "t", 0)) for opt in self.optimizers],
            "rngs": {name: _rng_state(r) for name, r in self.rngs.items()},
            "rows": [asdict(r) for r in self.rows],
        }
        (d / "trainer.json").write_text(json.dumps(meta, indent=1))
        return d

    @classmethod
    def resume(cls, directory, queue: QueryQueue | None = None) -> "Trainer":
        from .envs import LearnerTrajectory

        d = Path(directory)
        meta = json.loads((d / "trainer.json").read_text())
        config = config_from_dict(meta["config"])
        env_config = GridWorldConfig(**meta["env"])
        tr = cls(config, env_config, meta["seed"], meta["run_id"], queue)
        features = env_config.feature_table()
        for k in range(config.ensemble_size):
            tr.models[k] = RewardModel.load(d / f"reward_model_{k}", features)
            with np.load(d / f"optimizer_{k}.npz") as z:
                state = {key: (None if z[key].size == 0 else z[key].copy()) for key in z.files}
            if "t" in state:
                state["t"] = meta["optimizer_t"][k]
            tr.optimizers[k].load_state_dict(state)
        with np.load(d / "policy.npz") as z:
            tr.policy.q = z["q"].copy()
        tr.policy.temperature = meta["temperature"]
        with np.load(d / "bank.npz") as z:
            n = len(z["ids"])
            # replay insertions so ring-buffer slots line up with the saved run
            tr.bank.inserted = meta["bank_inserted"] - n
            for i in range(n):
                t = Trajectory(z["cells"][i], z["actions"][i], z["next_cells"][i],
                               z["boot_cells"][i], z["dones"][i].astype(bool),
                               z["true_rewards"][i], env_config, int(z["ids"][i]),
                               int(z["stamps"][i]))
                tr.bank.add(t, z["learner_rewards"][i])
        with np.load(d / "preferences.npz") as z:
            for i in range(len(z["labels"])):
                sides = []
                for side in ("tau0", "tau1"):
                    sides.append(LearnerTrajectory(
                        z[f"{side}_cells"][i], z[f"{side}_actions"][i],
                        z[f"{side}_next_cells"][i], z[f"{side}_boot_cells"][i],
                        z[f"{side}_dones"][i].astype(bool), env_config,
                        int(z[f"{side}_id"][i])))
                tr.dataset.append(PreferenceTuple(sides[0], sides[1], int(z["labels"][i])))
        tr.global_step = meta["global_step"]
        tr.sessions = meta["sessions"]
        tr.next_traj_id = meta["next_traj_id"]
        tr.queried_ids = set(meta["queried_ids"])
        tr.last_losses = meta["last_losses"]
        tr.abstained = meta["abstained"]
        for name, state in meta["rngs"].items():
            _set_rng_state(tr.rngs[name], state)
        tr.oracle = None if tr.queue is not None else SyntheticOracle(
            config.flip_probability, tr.rngs["oracle"])
        tr.rows = [MetricsRow(**r) for r in meta["rows"]]
        return tr


def config_to_dict(config: TrainerConfig) -> dict:
    out = asdict(config)
    out["reward_hidden"] = list(config.reward_hidden)
    return out


def config_from_dict(data: dict) -> TrainerConfig:
    known = {f.name for f in fields(TrainerConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown trainer config keys: {unknown}")
    return TrainerConfig(**data)


def with_overrides(config: TrainerConfig, **changes) -> TrainerConfig:
    return replace(config, **{k: v for k, v in changes.items() if v is not None})
