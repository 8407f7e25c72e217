import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import Seg, random_trajectories, small_model, table_model
from prefrl.approximator import SGD, fd_gradient_error, forward
from prefrl.envs import GridWorldConfig
from prefrl.reward_model import (
    PREFER0, PREFER1, ActionDistanceDataset, BudgetExhaustedError, EmptyBatchError,
    PreferenceDataset, PreferenceTuple, RewardModel, TripletBatch, ad_loss, bt_probability,
    ce_loss, combined_loss, encode, make_triplets, preference_probability, triplet_loss,
)


# -- reward / embedding ---------------------------------------------------------------

def test_zero_params_give_zero_reward_and_embedding():
    cfg = GridWorldConfig()
    m = RewardModel.create(cfg.feature_table(), np.random.default_rng(0))
    m.params[:] = 0.0
    assert m.reward(cfg.observation(5), 2) == 0.0
    assert not m.embed(cfg.observation(5), 2).any()
    traj = random_trajectories(cfg, 1, np.random.default_rng(0))[0]
    assert not m.reward_vector(traj).any()


def test_default_embedding_width_and_bound():
    cfg = GridWorldConfig()
    m = RewardModel.create(cfg.feature_table(), np.random.default_rng(1))
    assert m.embedding_width == 64
    m.params *= 50.0  # saturate
    table = m.reward_table()
    assert np.abs(table).max() <= 1.0


def test_reward_matches_naive_forward():
    cfg = GridWorldConfig()
    m = RewardModel.create(cfg.feature_table(), np.random.default_rng(2))
    x = encode(cfg.observation(37), 3)
    (W0, b0), (W1, b1), (W2, b2) = [
        (m.params[o:o + l.input_width * l.output_width].reshape(l.input_width, l.output_width),
         m.params[o + l.input_width * l.output_width:o + l.input_width * l.output_width + l.output_width])
        for o, l in zip(np.cumsum([0] + [l.input_width * l.output_width + l.output_width
                                         for l in m.spec])[:-1], m.spec)]
    h1 = [math.tanh(sum(x[i] * W0[i, j] for i in range(6)) + b0[j]) for j in range(64)]
    h2 = [math.tanh(sum(h1[i] * W1[i, j] for i in range(64)) + b1[j]) for j in range(64)]
    r = math.tanh(sum(h2[i] * W2[i, 0] for i in range(64)) + b2[0])
    assert abs(m.reward(cfg.observation(37), 3) - r) < 1e-12


def test_embed_then_final_layer_reproduces_reward():
    cfg = GridWorldConfig()
    m = RewardModel.create(cfg.feature_table(), np.random.default_rng(3))
    e = m.embed(cfg.observation(12), 1)
    last = m.spec[-1]
    out, _ = forward(m.params[-(last.input_width + 1):], [last], e)
    assert abs(out[0] - m.reward(cfg.observation(12), 1)) < 1e-12


def test_reward_vector_matches_pointwise_reward_exactly():
    cfg = GridWorldConfig()
    m = RewardModel.create(cfg.feature_table(), np.random.default_rng(4))
    traj = random_trajectories(cfg, 1, np.random.default_rng(5))[0]
    vec = m.reward_vector(traj)
    assert vec.shape == (50,)
    pointwise = [m.reward(cfg.observation(c), a) for c, a in zip(traj.cells, traj.actions)]
    np.testing.assert_allclose(vec, pointwise, rtol=0, atol=1e-12)
    # the sum is the return the preference probability is built from
    other = random_trajectories(cfg, 1, np.random.default_rng(6))[0]
    p = preference_probability(m, traj, other)
    assert p == pytest.approx(bt_probability(vec.sum(), m.reward_vector(other).sum()), abs=1e-15)


def test_wrong_input_width_raises():
    from prefrl.approximator import DimensionError

    m = table_model([0.1, 0.2])
    with pytest.raises(DimensionError):
        m.reward(np.zeros(3), 0)


# -- Bradley-Terry ----------------------------------------------------------------------

def test_bt_examples():
    assert bt_probability(0.0, 0.0) == 0.5
    assert bt_probability(1.0, 0.0) == pytest.approx(0.731059, abs=1e-6)
    m = table_model([0.5, 0.0])
    assert preference_probability(m, Seg([0, 0]), Seg([1, 1])) == pytest.approx(0.731059, abs=1e-6)
    assert preference_probability(m, Seg([0, 1]), Seg([0, 1])) == 0.5


def test_bt_extreme_returns_stay_finite():
    assert bt_probability(1e4, -1e4) == 1.0
    assert bt_probability(-1e4, 1e4) == 0.0
    assert math.isfinite(bt_probability(800.0, 799.0))


@given(st.floats(-200, 200), st.floats(-200, 200), st.floats(-50, 50))
@settings(max_examples=300)
def test_bt_normalization_and_shift(a, b, c):
    assert abs(bt_probability(a, b) + bt_probability(b, a) - 1.0) < 1e-9
    assert abs(bt_probability(a + c, b + c) - bt_probability(a, b)) < 1e-9


def test_shift_invariance_per_step_constant():
    rng = np.random.default_rng(1)
    r = rng.uniform(-0.5, 0.5, 64)
    t0, t1 = Seg(rng.integers(0, 64, 20)), Seg(rng.integers(0, 64, 20))
    base = preference_probability(table_model(r), t0, t1)
    for c in (-0.4, 0.01, 0.45):
        assert abs(preference_probability(table_model(r + c), t0, t1) - base) < 1e-9


# -- cross-entropy -----------------------------------------------------------------------

def test_ce_examples():
    m = table_model([0.5, 0.0])
    pref, same = Seg([0, 0]), Seg([1, 1])
    batch = [PreferenceTuple(pref, same, PREFER0), PreferenceTuple(same, Seg([1, 1]), PREFER1)]
    loss, _ = ce_loss(m, batch)
    assert loss == pytest.approx((-math.log(0.731059) - math.log(0.5)) / 2, abs=1e-6)
    exact = (math.log1p(math.exp(-1.0)) + math.log(2)) / 2
    assert loss == pytest.approx(exact, abs=1e-12)
    # the commonly quoted 0.503216 agrees only to about 1e-5
    assert abs(loss - 0.503216) < 2e-5
    loss, _ = ce_loss(m, [PreferenceTuple(same, Seg([1, 1]), PREFER0)])
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_ce_approaches_zero_for_confident_model():
    m = table_model([9.9, -9.9], output_bound=10.0)
    loss, _ = ce_loss(m, [PreferenceTuple(Seg([0] * 10), Seg([1] * 10), PREFER0)])
    assert loss < 1e-60


def test_ce_empty_batch_raises():
    with pytest.raises(EmptyBatchError):
        ce_loss(table_model([0.0, 0.1]), [])


def test_ce_decreases_monotonically_on_separable_data():
    cfg = GridWorldConfig()
    rng = np.random.default_rng(0)
    m = RewardModel.create(cfg.feature_table(), rng)
    trajs = random_trajectories(cfg, 20, rng)
    # label by how far right the segment ends up: separable by a linear score
    score = [t.cells.mean() % cfg.width for t in trajs]
    data = [PreferenceTuple(trajs[2 * i].learner_view(), trajs[2 * i + 1].learner_view(),
                            PREFER0 if score[2 * i] > score[2 * i + 1] else PREFER1)
            for i in range(10)]
    opt = SGD(learning_rate=1e-3)
    losses = []
    for _ in range(200):
        loss, grad = ce_loss(m, data)
        losses.append(loss)
        m.params = opt.step(m.params, grad)
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < losses[0]


# -- triplet ------------------------------------------------------------------------------

def test_triplet_examples():
    # per-key rewards: anchor 0, preferred 2, rejected 3 (single-step segments)
    m = table_model([0.0, 2.0, 3.0], output_bound=10.0)
    data = [PreferenceTuple(Seg([1]), Seg([2]), PREFER0)]
    loss, _ = triplet_loss(m, Seg([0]), data, margin=1.0)
    assert loss == pytest.approx(0.0, abs=1e-12)  # max(0, 4 - 9 + 1)
    loss, _ = triplet_loss(m, Seg([0]), data, margin=6.0)
    assert loss == pytest.approx(1.0, abs=1e-12)  # 4 - 9 + 6
    # literal form: unsquared negative distance, 4 - 3 + 1
    loss, _ = triplet_loss(m, Seg([0]), data, mode="literal_eq3", margin=1.0)
    assert loss == pytest.approx(2.0, abs=1e-12)


def test_triplet_zero_when_anchor_matches_preferred():
    m = table_model([0.3, 0.3, -0.4])
    data = [PreferenceTuple(Seg([2, 2]), Seg([1, 1]), PREFER1)]
    loss, grad = triplet_loss(m, Seg([0, 0]), data, margin=0.0)
    assert loss == 0.0 and not grad.any()


def test_triplet_empty_labeled_raises():
    with pytest.raises(EmptyBatchError):
        triplet_loss(table_model([0.0, 0.1]), Seg([0]), [])


def test_make_triplets_subsamples_without_replacement():
    data = [PreferenceTuple(Seg([i]), Seg([i + 1]), PREFER0) for i in range(30)]
    batch = make_triplets([Seg([99]), Seg([98])], data, per_anchor=16,
                          rng=np.random.default_rng(0))
    assert len(batch) == 32
    assert len(set(batch.positives[:16, 0])) == 16
    full = make_triplets([Seg([99])], data[:5])
    assert len(full) == 5


# -- action distance -------------------------------------------------------------------------

def test_ad_examples():
    emb = np.array([[0.0, 0.0], [0.0, 2.0], [0.5, 0.5]])
    m = table_model(np.tanh(emb[:, 0]), embeddings=emb)
    # keys index feature rows directly: rows 0 and 1 are (0, 0) and (0, 2)
    loss, _ = ad_loss(m, ActionDistanceDataset(np.array([0]), np.array([0]), np.array([0]),
                                                np.array([1]), np.array([5.0])))
    assert loss == pytest.approx(1.0, abs=1e-12)
    loss, _ = ad_loss(m, ActionDistanceDataset(np.array([0]), np.array([2]), np.array([0]),
                                                np.array([2]), np.array([0.0])))
    assert loss == 0.0


def test_ad_zero_when_distances_match():
    emb = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 2.0]])
    m = table_model(np.tanh(emb[:, 0]), embeddings=emb)
    d = ActionDistanceDataset(np.zeros(3, np.int64), np.array([0, 0, 1]),
                              np.zeros(3, np.int64), np.array([1, 2, 2]),
                              np.array([1.0, 2.0, 1.0]))
    loss, _ = ad_loss(m, d)
    assert loss == pytest.approx(0.0, abs=1e-24)


def test_ad_empty_raises():
    with pytest.raises(EmptyBatchError):
        ad_loss(table_model([0.0, 0.1]), ActionDistanceDataset())


# -- combined ------------------------------------------------------------------------------

def _toy_inputs(cfg, rng, n_pref=3):
    trajs = random_trajectories(cfg, 2 * n_pref + 4, rng, horizon=12)
    prefs = [PreferenceTuple(trajs[2 * i].learner_view(), trajs[2 * i + 1].learner_view(),
                             int(rng.integers(0, 2))) for i in range(n_pref)]
    anchors = trajs[2 * n_pref:]
    triplets = make_triplets(anchors, prefs)
    i = rng.integers(0, 6, 10)
    j = i + rng.integers(1, 6, 10)
    src = anchors[0]
    pairs = ActionDistanceDataset(src.cells[i], src.actions[i], src.cells[j], src.actions[j],
                                  (j - i).astype(float))
    return prefs, triplets, pairs


def test_combined_is_weighted_sum_of_components():
    m, cfg = small_model(3)
    prefs, triplets, pairs = _toy_inputs(cfg, np.random.default_rng(3))
    total, grad, comps = combined_loss(m, prefs, triplets, pairs, 1.0, 0.5, 3.0)
    ce, g_ce = ce_loss(m, prefs)
    tl, g_t, _ = combined_loss(m, triplets=triplets, lambda_ce=0, lambda_t=1, lambda_a=0)
    al, g_a = ad_loss(m, pairs)
    assert comps == pytest.approx({"ce": ce, "triplet": tl, "ad": al}, abs=1e-12)
    assert total == pytest.approx(ce + 0.5 * tl + 3.0 * al, abs=1e-12)
    np.testing.assert_allclose(grad, g_ce + 0.5 * g_t + 3.0 * g_a, atol=1e-12)
    assert 1.0 * 0.2 + 0.5 * 0.4 + 3.0 * 0.1 == pytest.approx(0.7)


def test_combined_with_zero_aux_weights_equals_ce_exactly():
    m, cfg = small_model(4)
    prefs, triplets, pairs = _toy_inputs(cfg, np.random.default_rng(4))
    total, grad, comps = combined_loss(m, prefs, triplets, pairs, 1.0, 0.0, 0.0)
    ce, g_ce = ce_loss(m, prefs)
    assert total == ce and set(comps) == {"ce"}
    assert grad.tobytes() == g_ce.tobytes()


def test_combined_all_empty_raises():
    with pytest.raises(EmptyBatchError):
        combined_loss(table_model([0.0, 0.1]), None, None, None)


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("which", ["ce", "triplet", "literal", "ad", "combined"])
def test_loss_gradients_match_finite_differences(seed, which):
    m, cfg = small_model(seed)
    prefs, triplets, pairs = _toy_inputs(cfg, np.random.default_rng(100 + seed))
    kwargs = {
        "ce": dict(preferences=prefs, lambda_t=0, lambda_a=0),
        "triplet": dict(triplets=triplets, lambda_ce=0, lambda_a=0, margin=2.0),
        "literal": dict(triplets=triplets, lambda_ce=0, lambda_a=0, margin=2.0,
                        triplet_mode="literal_eq3"),
        "ad": dict(pairs=pairs, lambda_ce=0, lambda_t=0),
        "combined": dict(preferences=prefs, triplets=triplets, pairs=pairs, margin=2.0),
    }[which]

    def objective(p):
        loss, grad, _ = combined_loss(m.with_params(p), **kwargs)
        return loss, grad

    if which != "literal":
        assert fd_gradient_error(objective, m.params) < 1e-4
        return
    # The unsquared distance makes some parameter gradients tiny (~1e-8); there
    # the central difference carries ~1e-11 of roundoff, so compare those
    # components absolutely.
    _, grad = objective(m.params)
    eps = 1e-5
    num = np.empty_like(grad)
    for i in range(len(grad)):
        p = m.params.copy()
        p[i] += eps
        up = objective(p)[0]
        p[i] -= 2 * eps
        num[i] = (up - objective(p)[0]) / (2 * eps)
    err = np.abs(grad - num)
    rel = err / np.maximum(np.maximum(np.abs(grad), np.abs(num)), 1e-8)
    assert np.all((rel < 1e-4) | (err < 1e-10))


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_aux_losses_are_nonnegative(seed):
    m, cfg = small_model(seed % 7)
    prefs, triplets, pairs = _toy_inputs(cfg, np.random.default_rng(seed))
    for mode in ("symmetric_squared", "literal_eq3"):
        t, _, _ = combined_loss(m, triplets=triplets, lambda_ce=0, lambda_t=1, lambda_a=0,
                                triplet_mode=mode, margin=float(seed % 3))
        assert t >= 0
    a, _ = ad_loss(m, pairs)
    assert a >= 0


# -- datasets ------------------------------------------------------------------------------

def test_preference_dataset_budget():
    ds = PreferenceDataset(max_size=2)
    t = PreferenceTuple(Seg([0]), Seg([1]), PREFER0)
    ds.append(t)
    ds.append(t)
    with pytest.raises(BudgetExhaustedError):
        ds.append(t)
    assert len(ds) == 2


def test_preference_tuple_validation():
    with pytest.raises(ValueError):
        PreferenceTuple(Seg([0]), Seg([1]), 2)
    with pytest.raises(ValueError):
        PreferenceTuple(Seg([0]), Seg([1, 2]), PREFER0)
    t = PreferenceTuple(Seg([0]), Seg([1]), PREFER1)
    assert t.preferred.keys[0] == 1 and t.rejected.keys[0] == 0


def test_model_save_load_roundtrip(tmp_path):
    cfg = GridWorldConfig()
    m = RewardModel.create(cfg.feature_table(), np.random.default_rng(9))
    m.save(tmp_path / "rm")
    m2 = RewardModel.load(tmp_path / "rm", cfg.feature_table())
    assert m2.params.tobytes() == m.params.tobytes()
    assert m2.reward_table().tobytes() == m.reward_table().tobytes()
