import numpy as np
import pytest
from scipy import stats

from conftest import random_trajectories
from prefrl.agent import (
    NonFiniteTargetError, SoftQPolicy, TrajectoryBank, act, relabel, update_policy,
)
from prefrl.envs import GridWorldConfig
from prefrl.reward_model import RewardModel


def test_uniform_q_gives_uniform_actions():
    pol = SoftQPolicy.zeros(3)
    rng = np.random.default_rng(0)
    counts = np.bincount([act(pol, 1, rng) for _ in range(10_000)], minlength=4)
    assert stats.chisquare(counts).pvalue > 0.001


def test_greedy_picks_argmax():
    pol = SoftQPolicy(np.array([[0.1, 0.7, 0.3, 0.69]]))
    assert act(pol, 0, greedy=True) == 1
    pol.temperature = 1e-6
    assert act(pol, 0, np.random.default_rng(0)) == 1


def test_dominant_action_above_95_percent():
    pol = SoftQPolicy(np.array([[0.0, 1.0, 0.0, 0.0]]), temperature=0.1)
    p = pol.probabilities(0)
    assert p[1] == pytest.approx(1 / (1 + 3 * np.exp(-10)))
    rng = np.random.default_rng(1)
    draws = [act(pol, 0, rng) for _ in range(5000)]
    assert np.mean(np.array(draws) == 1) > 0.95


def test_probabilities_sum_to_one_for_large_q():
    pol = SoftQPolicy(np.array([[1e4, -1e4, 3.0, 1e4 - 1]]), temperature=0.05)
    p = pol.probabilities(0)
    assert np.isfinite(p).all() and p.sum() == pytest.approx(1.0)


def test_bandit_limit_with_zero_discount():
    pol = SoftQPolicy.zeros(2, gamma=1e-12, alpha=0.5)
    for _ in range(60):
        update_policy(pol, [0], [2], [0.8], [1])
    assert pol.q[0, 2] == pytest.approx(0.8, abs=1e-9)


def test_zero_learning_rate_changes_nothing():
    pol = SoftQPolicy(np.random.default_rng(0).normal(size=(4, 4)), alpha=0.0)
    before = pol.q.copy()
    update_policy(pol, [0, 1], [1, 2], [1.0, -1.0], [2, 3])
    np.testing.assert_array_equal(pol.q, before)


def _value_iteration(P, R, gamma, temp, baseline, iters=20_000):
    """Soft Bellman fixed point for deterministic transitions P[s, a]."""
    Q = np.zeros(R.shape)
    for _ in range(iters):
        V = temp * (np.log(np.exp(Q / temp).sum(axis=1)) - baseline)
        Q = R + gamma * V[P]
    return Q


@pytest.mark.parametrize("baseline", [True, False])
def test_two_state_chain_matches_value_iteration(baseline):
    # two states, two actions: action 0 stays, action 1 switches; reward only for staying in s1
    P = np.array([[0, 1], [1, 0]])
    R = np.array([[0.0, 0.1], [1.0, 0.0]])
    gamma, temp = 0.9, 0.5
    pol = SoftQPolicy.zeros(2, n_actions=2, gamma=gamma, alpha=0.5, temperature=temp,
                            entropy_baseline=baseline)
    s = np.array([0, 0, 1, 1])
    a = np.array([0, 1, 0, 1])
    for _ in range(3000):
        update_policy(pol, s, a, R[s, a], P[s, a])
    ref = _value_iteration(P, R, gamma, temp, np.log(2) if baseline else 0.0)
    np.testing.assert_allclose(pol.q, ref, atol=1e-3)


def test_duplicate_entries_are_averaged():
    pol = SoftQPolicy.zeros(2, gamma=0.5, alpha=1.0, entropy_baseline=True)
    update_policy(pol, [0, 0], [1, 1], [1.0, 3.0], [1, 1])
    assert pol.q[0, 1] == pytest.approx(2.0)


def test_non_finite_target_aborts_and_restores():
    pol = SoftQPolicy(np.ones((2, 4)))
    with pytest.raises(NonFiniteTargetError):
        update_policy(pol, [0], [0], [np.nan], [1])
    np.testing.assert_array_equal(pol.q, np.ones((2, 4)))


# -- bank ----------------------------------------------------------------------------

def test_bank_order_eviction_and_last_k():
    cfg = GridWorldConfig()
    trajs = random_trajectories(cfg, 7, np.random.default_rng(0))
    bank = TrajectoryBank(capacity=5, horizon=50)
    for t in trajs:
        bank.add(t)
    assert len(bank) == 5
    assert [t.id for t in bank.trajectories()] == [t.id for t in trajs[2:]]
    assert [t.id for t in bank.last(3)] == [t.id for t in trajs[4:]]
    assert [t.id for t in bank.last(50)] == [t.id for t in trajs[2:]]
    np.testing.assert_array_equal(bank.keys(bank.last_slots(1))[0], trajs[-1].keys)
    with pytest.raises(ValueError):
        bank.add(random_trajectories(cfg, 1, np.random.default_rng(1), horizon=10)[0])


def test_relabel_matches_direct_reward_and_is_idempotent():
    cfg = GridWorldConfig()
    rng = np.random.default_rng(2)
    model = RewardModel.create(cfg.feature_table(), rng)
    bank = TrajectoryBank(50, 50)
    for t in random_trajectories(cfg, 30, rng):
        bank.add(t)
    assert relabel(bank, model) == 30 * 50
    first = bank.rewards.copy()
    relabel(bank, model)
    assert bank.rewards.tobytes() == first.tobytes()
    slots = bank.active_slots()
    for _ in range(100):
        s, t = slots[rng.integers(len(slots))], rng.integers(50)
        direct = model.reward(cfg.observation(bank.cells[s, t]), int(bank.actions[s, t]))
        assert abs(bank.rewards[s, t] - direct) < 1e-12


def test_relabel_with_zero_model_zeros_rewards():
    cfg = GridWorldConfig()
    rng = np.random.default_rng(3)
    model = RewardModel.create(cfg.feature_table(), rng)
    model.params[:] = 0
    bank = TrajectoryBank(10, 50)
    for t in random_trajectories(cfg, 5, rng):
        bank.add(t, np.ones(50))
    relabel(bank, model)
    assert not bank.rewards[bank.active_slots()].any()


def test_learner_paths_never_touch_the_hidden_channel():
    cfg = GridWorldConfig()
    rng = np.random.default_rng(4)
    trajs = random_trajectories(cfg, 10, rng)

    class Guard:
        def __get__(self, obj, owner=None):
            raise AssertionError("learner code read the ground-truth channel")

    bank = TrajectoryBank(20, 50)
    model = RewardModel.create(cfg.feature_table(), rng)
    cls = type(trajs[0])
    original = cls.__dict__["true_rewards"]
    try:
        cls.true_rewards = Guard()
        for t in trajs:
            bank.add(t)
        relabel(bank, model)
        pol = SoftQPolicy.zeros(cfg.n_cells)
        update_policy(pol, *bank.sample_transitions(64, rng))
        from prefrl.reward_model import PreferenceTuple, combined_loss, make_triplets
        from prefrl.trainer import build_dp

        prefs = [PreferenceTuple(trajs[0].learner_view(), trajs[1].learner_view(), 0)]
        combined_loss(model, prefs, make_triplets(trajs[2:], prefs), build_dp(bank, 10, 5, rng))
        with pytest.raises(AssertionError):
            trajs[0].true_rewards
    finally:
        cls.true_rewards = original
