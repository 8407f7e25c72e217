"""Learned reward R(s, a), its penultimate embedding, and the training losses.

Losses work on integer keys ``cell * 4 + action``. A batch is evaluated by
running the network once over the feature table (or the unique keys, for
large tables) and gathering, so a minibatch of trajectories costs one
forward/backward over at most ``n_cells * 4`` rows however many segments it
contains.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .approximator import (
    DimensionError, LayerSpec, backward, forward, init_params, load_params,
    mlp_spec, save_params,
)
from .kernels import N_ACTIONS

PREFER0 = 0
PREFER1 = 1
# Feature tables up to this many rows are always evaluated whole; keys then
# index the result directly and every code path sees identical numbers.
FULL_TABLE_ROWS = 4096
TRIPLET_MODES = ("symmetric_squared", "literal_eq3")


class EmptyBatchError(ValueError):
    """A loss was asked to average over nothing."""


class BudgetExhaustedError(RuntimeError):
    """The preference dataset is at its feedback budget."""


def encode(state, action: int) -> np.ndarray:
    onehot = np.zeros(N_ACTIONS)
    onehot[int(action)] = 1.0
    return np.concatenate([np.asarray(state, dtype=np.float64), onehot])


class RewardModel:
    """Reward network: tanh hidden layers, tanh output scaled to ``output_bound``."""

    def __init__(self, spec: Sequence[LayerSpec], params: np.ndarray,
                 feature_table: np.ndarray | None = None, output_bound: float = 1.0):
        spec = list(spec)
        if spec[-1].output_width != 1:
            raise ValueError("reward network must end in a single output")
        if len(spec) < 2 or spec[-2].output_width < 2:
            raise ValueError("reward network needs a penultimate layer of width >= 2")
        self.spec = spec
        self.params = np.asarray(params, dtype=np.float64)
        self.output_bound = float(output_bound)
        self.feature_table = feature_table

    @classmethod
    def create(cls, feature_table: np.ndarray, rng: np.random.Generator,
               hidden: Sequence[int] = (64, 64), output_bound: float = 1.0) -> "RewardModel":
        spec = mlp_spec(feature_table.shape[1], hidden, 1, "tanh", "tanh")
        return cls(spec, init_params(spec, rng), feature_table, output_bound)

    def copy(self) -> "RewardModel":
        return RewardModel(self.spec, self.params.copy(), self.feature_table, self.output_bound)

    def with_params(self, params: np.ndarray) -> "RewardModel":
        return RewardModel(self.spec, params, self.feature_table, self.output_bound)

    @property
    def embedding_width(self) -> int:
        return self.spec[-2].output_width

    # single inputs -------------------------------------------------------

    def _forward_one(self, state, action):
        x = encode(state, action)
        if x.shape[0] != self.spec[0].input_width:
            raise DimensionError(f"encoded input has width {x.shape[0]}, "
                                 f"network expects {self.spec[0].input_width}")
        return forward(self.params, self.spec, x)

    def reward(self, state, action: int) -> float:
        out, _ = self._forward_one(state, action)
        return float(self.output_bound * out[0])

    def embed(self, state, action: int) -> np.ndarray:
        _, trace = self._forward_one(state, action)
        return trace.activation(-2)[0].copy()

    # key batches ---------------------------------------------------------

    def forward_keys(self, keys: np.ndarray):
        """``(rewards, embeddings, trace)`` for a 1-D array of keys."""
        if self.feature_table is None:
            raise ValueError("model has no feature table; build it with the env's feature_table()")
        out, trace = forward(self.params, self.spec, self.feature_table[keys])
        return self.output_bound * out[:, 0], trace.activation(-2), trace

    def reward_table(self) -> np.ndarray:
        """Reward for every key in the feature table."""
        r, _, _ = self.forward_keys(np.arange(self.feature_table.shape[0]))
        return r

    def evaluation_rows(self, keys: np.ndarray):
        """``(rows, index)``: which keys to run through the network and how to
        map the original keys onto the result (``result[index]``)."""
        keys = np.asarray(keys)
        n_table = self.feature_table.shape[0]
        if n_table <= FULL_TABLE_ROWS:
            return np.arange(n_table), keys
        uniq, inv = np.unique(keys.ravel(), return_inverse=True)
        return uniq, inv.reshape(keys.shape)

    def rewards_for(self, keys: np.ndarray) -> np.ndarray:
        rows, index = self.evaluation_rows(keys)
        r, _, _ = self.forward_keys(rows)
        return r[index]

    def reward_vector(self, trajectory) -> np.ndarray:
        return self.rewards_for(np.asarray(trajectory.keys))

    def param_gradient(self, trace, reward_grad: np.ndarray,
                       embedding_grad: np.ndarray | None = None) -> np.ndarray:
        g_out = (self.output_bound * reward_grad)[:, None]
        extra = None if embedding_grad is None else {-2: embedding_grad}
        grad, _ = backward(self.params, self.spec, trace, g_out, extra)
        return grad

    # persistence ---------------------------------------------------------

    def save(self, path) -> None:
        save_params(path, self.params, self.spec, output_bound=self.output_bound)

    @classmethod
    def load(cls, path, feature_table: np.ndarray | None = None) -> "RewardModel":
        params, spec, meta = load_params(path)
        return cls(spec, params, feature_table, meta.get("output_bound", 1.0))


# --------------------------------------------------------------------------
# datasets

@dataclass(frozen=True)
class PreferenceTuple:
    tau0: object
    tau1: object
    label: int

    def __post_init__(self):
        if self.label not in (PREFER0, PREFER1):
            raise ValueError(f"label must be PREFER0 or PREFER1, got {self.label!r}")
        if len(self.tau0) != len(self.tau1):
            raise ValueError("both trajectories of a preference tuple must have the same length")

    @property
    def preferred(self):
        return self.tau0 if self.label == PREFER0 else self.tau1

    @property
    def rejected(self):
        return self.tau1 if self.label == PREFER0 else self.tau0


class PreferenceDataset:
    """Append-only labelled pairs, capped at the feedback budget."""

    def __init__(self, max_size: int | None = None):
        self.max_size = max_size
        self._tuples: list[PreferenceTuple] = []
        self._cache = None

    def append(self, item: PreferenceTuple) -> None:
        if self.max_size is not None and len(self._tuples) >= self.max_size:
            raise BudgetExhaustedError(f"feedback budget of {self.max_size} is used up")
        self._tuples.append(item)
        self._cache = None

    def __len__(self) -> int:
        return len(self._tuples)

    def __getitem__(self, i):
        return self._tuples[i]

    def __iter__(self):
        return iter(self._tuples)

    def arrays(self):
        """``(keys0, keys1, labels)`` with key arrays of shape (N, H)."""
        if self._cache is None:
            if not self._tuples:
                raise EmptyBatchError("preference dataset is empty")
            k0 = np.stack([t.tau0.keys for t in self._tuples])
            k1 = np.stack([t.tau1.keys for t in self._tuples])
            y = np.array([t.label for t in self._tuples], dtype=np.int64)
            self._cache = (k0, k1, y)
        return self._cache


@dataclass
class ActionDistanceDataset:
    """State-action pairs from one trajectory with their index gap ``d = j - i``."""

    cell_i: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    action_i: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    cell_j: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    action_j: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    distance: np.ndarray = field(default_factory=lambda: np.zeros(0, np.float64))
    source_id: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    index_i: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    index_j: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __len__(self) -> int:
        return len(self.distance)

    @property
    def keys_i(self) -> np.ndarray:
        return self.cell_i * N_ACTIONS + self.action_i

    @property
    def keys_j(self) -> np.ndarray:
        return self.cell_j * N_ACTIONS + self.action_j

    def subset(self, idx) -> "ActionDistanceDataset":
        return ActionDistanceDataset(*(getattr(self, f)[idx] for f in (
            "cell_i", "action_i", "cell_j", "action_j", "distance", "source_id",
            "index_i", "index_j")))


# --------------------------------------------------------------------------
# probability

def _returns(model: RewardModel, *trajs) -> list[float]:
    keys = np.stack([np.asarray(t.keys) for t in trajs])
    return [float(v) for v in model.rewards_for(keys).sum(axis=1)]


def _logistic(d):
    """``1 / (1 + exp(-d))`` without overflow on either tail."""
    d = np.asarray(d, dtype=np.float64)
    z = np.exp(-np.abs(d))
    return np.where(d >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def bt_probability(return0: float, return1: float) -> float:
    """``P[tau0 > tau1] = exp(R0) / (exp(R0) + exp(R1))``, written as a
    logistic of the return gap so neither exponential can overflow."""
    return float(_logistic(return0 - return1))


def preference_probability(model: RewardModel, tau0, tau1) -> float:
    if len(tau0) != len(tau1):
        raise ValueError("trajectories must have equal length")
    s0, s1 = _returns(model, tau0, tau1)
    return bt_probability(s0, s1)


def preference_probabilities(model: RewardModel, pairs) -> np.ndarray:
    """Vectorised ``preference_probability`` over a list of ``(tau0, tau1)``."""
    if not pairs:
        return np.zeros(0)
    k0 = np.stack([p[0].keys for p in pairs])
    k1 = np.stack([p[1].keys for p in pairs])
    s0 = model.rewards_for(k0).sum(axis=1)
    s1 = model.rewards_for(k1).sum(axis=1)
    return _logistic(s0 - s1)


# --------------------------------------------------------------------------
# loss terms on gathered rewards / embeddings

def _ce_term(r, i0, i1, labels):
    """Bradley-Terry cross-entropy. ``i0``/``i1`` index into ``r`` with shape (B, H)."""
    s0 = r[i0].sum(axis=1)
    s1 = r[i1].sum(axis=1)
    # -log P[preferred]: softplus of (other - preferred)
    sign = np.where(labels == PREFER0, 1.0, -1.0)
    margin = sign * (s0 - s1)
    loss = np.logaddexp(0.0, -margin)
    b = len(labels)
    # d loss / d margin = -sigmoid(-margin)
    dmargin = -np.exp(-margin - np.logaddexp(0.0, -margin)) / b
    ds0 = dmargin * sign
    g = np.bincount(i0.ravel(), np.repeat(ds0, i0.shape[1]), minlength=len(r))
    g -= np.bincount(i1.ravel(), np.repeat(ds0, i1.shape[1]), minlength=len(r))
    return float(loss.mean()), g


def _triplet_term(r, ia, ig, ib, mode, margin):
    ra, rg, rb = r[ia], r[ig], r[ib]
    dpos = ra - rg
    dneg = ra - rb
    pos = (dpos * dpos).sum(axis=1)
    neg_sq = (dneg * dneg).sum(axis=1)
    if mode == "symmetric_squared":
        neg = neg_sq
        dneg_grad = 2.0 * dneg
    elif mode == "literal_eq3":
        neg = np.sqrt(neg_sq)
        safe = np.where(neg > 0, neg, 1.0)
        dneg_grad = dneg / safe[:, None]
    else:
        raise ValueError(f"triplet mode must be one of {TRIPLET_MODES}, got {mode!r}")
    hinge = pos - neg + margin
    active = (hinge > 0).astype(np.float64)[:, None] / len(hinge)
    ga = active * (2.0 * dpos - dneg_grad)
    gg = active * (-2.0 * dpos)
    gb = active * dneg_grad
    n = len(r)
    g = (np.bincount(ia.ravel(), ga.ravel(), minlength=n)
         + np.bincount(ig.ravel(), gg.ravel(), minlength=n)
         + np.bincount(ib.ravel(), gb.ravel(), minlength=n))
    return float(np.maximum(hinge, 0.0).mean()), g


def _ad_term(e, ii, ij, d):
    diff = e[ii] - e[ij]
    dist = (diff * diff).sum(axis=1)
    err = dist - d
    n = len(d)
    coef = (4.0 * err / n)[:, None] * diff
    g = np.zeros_like(e)
    np.add.at(g, ii, coef)
    np.add.at(g, ij, -coef)
    return float((err * err).mean()), g


@dataclass
class TripletBatch:
    """Key arrays (T, H) for anchor, preferred and rejected segments."""

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def __len__(self) -> int:
        return len(self.anchors)


def make_triplets(anchors: Iterable, labeled, per_anchor: int | None = None,
                  rng: np.random.Generator | None = None) -> TripletBatch:
    """Pair every anchor with labelled tuples as (anchor, preferred, rejected).

    With ``per_anchor`` set, each anchor gets ``min(len(labeled), per_anchor)``
    tuples drawn without replacement; otherwise all tuples are used.
    """
    labeled = list(labeled)
    if not labeled:
        raise EmptyBatchError("triplet loss needs at least one labelled tuple")
    anchors = list(anchors)
    good = np.stack([t.preferred.keys for t in labeled])
    bad = np.stack([t.rejected.keys for t in labeled])
    a_rows, idx_rows = [], []
    for k, anchor in enumerate(anchors):
        if per_anchor is None or per_anchor >= len(labeled):
            idx = np.arange(len(labeled))
        else:
            if rng is None:
                raise ValueError("subsampling tuples per anchor needs an rng")
            idx = rng.choice(len(labeled), size=per_anchor, replace=False)
        a_rows.append(np.repeat(np.asarray(anchor.keys)[None, :], len(idx), axis=0))
        idx_rows.append(idx)
    if not anchors:
        h = good.shape[1]
        empty = np.zeros((0, h), np.int64)
        return TripletBatch(empty, empty, empty)
    idx = np.concatenate(idx_rows)
    return TripletBatch(np.concatenate(a_rows), good[idx], bad[idx])


# --------------------------------------------------------------------------
# public losses

def _pref_arrays(batch):
    if isinstance(batch, PreferenceDataset):
        return batch.arrays()
    batch = list(batch)
    if not batch:
        raise EmptyBatchError("preference batch is empty")
    return (np.stack([t.tau0.keys for t in batch]),
            np.stack([t.tau1.keys for t in batch]),
            np.array([t.label for t in batch], dtype=np.int64))


def combined_loss(model: RewardModel, preferences=None, triplets: TripletBatch | None = None,
                  pairs: ActionDistanceDataset | None = None, lambda_ce: float = 1.0,
                  lambda_t: float = 0.5, lambda_a: float = 3.0,
                  triplet_mode: str = "symmetric_squared", margin: float = 1.0):
    """Weighted sum of cross-entropy, triplet and action-distance losses.

    Terms that are empty or carry zero weight are skipped entirely. Returns
    ``(loss, gradient, components)`` where ``components`` maps
    ``"ce"/"triplet"/"ad"`` to the unweighted term values that were computed.
    """
    terms = []
    if preferences is not None and lambda_ce != 0.0:
        k0, k1, y = _pref_arrays(preferences)
        terms.append(("ce", lambda_ce, (k0, k1), y))
    if triplets is not None and len(triplets) and lambda_t != 0.0:
        terms.append(("triplet", lambda_t, (triplets.anchors, triplets.positives,
                                            triplets.negatives), None))
    if pairs is not None and len(pairs) and lambda_a != 0.0:
        terms.append(("ad", lambda_a, (pairs.keys_i, pairs.keys_j), pairs.distance))
    if not terms:
        raise EmptyBatchError("combined loss has no non-empty weighted term")

    chunks = [k for _, _, ks, _ in terms for k in ks]
    flat = np.concatenate([c.ravel() for c in chunks])
    rows, flat_idx = model.evaluation_rows(flat)
    idx, pos = [], 0
    for c in chunks:
        idx.append(flat_idx[pos:pos + c.size].reshape(c.shape))
        pos += c.size

    r, e, trace = model.forward_keys(rows)
    g_r = np.zeros_like(r)
    g_e = None
    total = 0.0
    components = {}
    cursor = 0
    for name, weight, ks, extra in terms:
        parts = idx[cursor:cursor + len(ks)]
        cursor += len(ks)
        if name == "ce":
            value, g = _ce_term(r, parts[0], parts[1], extra)
        elif name == "triplet":
            value, g = _triplet_term(r, *parts, triplet_mode, margin)
        else:
            value, ge = _ad_term(e, parts[0], parts[1], extra)
            g_e = weight * ge if g_e is None else g_e + weight * ge
            components[name] = value
            total += weight * value
            continue
        components[name] = value
        total += weight * value
        g_r += weight * g
    grad = model.param_gradient(trace, g_r, g_e)
    return total, grad, components


def ce_loss(model: RewardModel, batch):
    """Mean Bradley-Terry cross-entropy. Returns ``(loss, gradient)``."""
    loss, grad, _ = combined_loss(model, preferences=batch, lambda_ce=1.0,
                                  lambda_t=0.0, lambda_a=0.0)
    return loss, grad


def triplet_loss(model: RewardModel, anchors, labeled, mode: str = "symmetric_squared",
                 margin: float = 1.0, per_anchor: int | None = None,
                 rng: np.random.Generator | None = None):
    """Hinge triplet loss with unlabelled anchors treated as preferred.

    ``anchors`` is one trajectory or a list of them. Returns ``(loss, gradient)``.
    """
    if hasattr(anchors, "keys") and not isinstance(anchors, (list, tuple)):
        anchors = [anchors]
    if len(labeled) == 0:
        raise EmptyBatchError("triplet loss needs at least one labelled tuple")
    batch = make_triplets(anchors, labeled, per_anchor, rng)
    if len(batch) == 0:
        raise EmptyBatchError("triplet loss needs at least one anchor")
    loss, grad, _ = combined_loss(model, triplets=batch, lambda_ce=0.0, lambda_t=1.0,
                                  lambda_a=0.0, triplet_mode=mode, margin=margin)
    return loss, grad


def ad_loss(model: RewardModel, pairs: ActionDistanceDataset):
    """Mean squared error between squared embedding distance and index gap."""
    if len(pairs) == 0:
        raise EmptyBatchError("action-distance batch is empty")
    loss, grad, _ = combined_loss(model, pairs=pairs, lambda_ce=0.0, lambda_t=0.0,
                                  lambda_a=1.0)
    return loss, grad
